"""Constraint tightening, reference governor, and the tracking controller.

The offline governor steers the nominal model to the origin inside
tightened sets, producing a zero-padded reference.  The online tracker
minimizes a tracking cost over nominal predictions with full control
authority; its only coupling to the adaptive component is the shifted
first-stage input box, which keeps the applied total input admissible
by construction.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, EmptyTightenedSet, GovernorInfeasible
from .ocp import (NonlinearOcp, QpConfig, SolveStatus, condense_linear_ocp,
                  finite_diff_jacobian, solve_qp, sqp_solve)

logger = logging.getLogger(__name__)


def growth_rate(model, input_bound):
    """One-step error growth rate of the nominal dynamics.

    ``L_f + L_g * input_bound`` bounds how far two nominal trajectories
    under the same bounded inputs can spread per step.
    """
    return model.lipschitz_f + model.lipschitz_g * input_bound


def growth_sum(rate, horizon):
    """sum_{i=0}^{horizon-1} rate^i, guarded at rate == 1."""
    if abs(rate - 1.0) < 1e-12:
        return float(horizon)
    return float((rate**horizon - 1.0) / (rate - 1.0))


@dataclass(frozen=True)
class TightenedSets:
    """Shrunk constraint sets used by the governor and the tracker.

    ``u_prime_bound`` is the tracker's tail input authority
    (u_max - u_max_a); ``u_r_bound`` additionally reserves a margin for
    the governor; the state box is shrunk per coordinate.
    """

    x_low: np.ndarray
    x_high: np.ndarray
    u_r_bound: float
    u_prime_bound: float
    u_max: float
    u_max_a: float
    w_prime: float

    def contains_reference_state(self, x, tol=0.0):
        return bool(np.all(x >= self.x_low - tol) and np.all(x <= self.x_high + tol))


def tighten_constraints(sets, w_prime, model, horizon, u_max_a, *,
                        u_margin_fraction=0.1, x_margin=None, x_margin_scale=1.0):
    """Build the tightened sets from the apparent disturbance bound.

    The default state margin is the worst-case accumulated spread
    ``w_prime * sum_i rate^i`` over the horizon; for persistent
    disturbances on weakly contractive plants this is very conservative,
    so explicit per-coordinate margins (``x_margin``) or a scale factor
    can override it.
    """
    u_prime = sets.u_max - u_max_a
    if u_prime <= 0:
        raise EmptyTightenedSet(
            f"adaptive authority {u_max_a} consumes the whole input set")
    if not (0.0 <= u_margin_fraction < 1.0):
        raise ConfigurationError("input margin fraction must lie in [0, 1)")
    u_r = (1.0 - u_margin_fraction) * u_prime
    d = sets.state_low.size
    if x_margin is not None:
        margin = np.broadcast_to(np.asarray(x_margin, dtype=float), (d,)).copy()
    else:
        rate = growth_rate(model, u_r)
        margin = np.full(d, w_prime * growth_sum(rate, horizon) * x_margin_scale)
    x_low = sets.state_low + margin
    x_high = sets.state_high - margin
    for i in range(d):
        if x_low[i] >= x_high[i]:
            raise EmptyTightenedSet(
                f"state margin {margin[i]:.6g} empties coordinate {i} "
                f"([{sets.state_low[i]:.6g}, {sets.state_high[i]:.6g}])",
                coordinate=i)
    return TightenedSets(x_low=x_low, x_high=x_high, u_r_bound=u_r,
                         u_prime_bound=u_prime, u_max=sets.u_max,
                         u_max_a=u_max_a, w_prime=w_prime)


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Zero-padded reference: meaningful up to its horizon, zero after.

    ``states`` keeps the solved trajectory including the (numerically
    tiny) terminal state; queries beyond the horizon return exact zeros,
    matching the padded-reference convention.
    """

    states: np.ndarray          # (horizon + 1, d)
    inputs: np.ndarray          # (horizon, m)

    @property
    def horizon(self):
        return self.inputs.shape[0]

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    def state(self, t):
        if t < self.horizon:
            return self.states[t]
        return np.zeros(self.state_dim)

    def input(self, t):
        if t < self.horizon:
            return self.inputs[t]
        return np.zeros(self.input_dim)

    def max_input_norm(self):
        """Largest infinity norm over the reference inputs (u_max_r)."""
        return float(np.max(np.abs(self.inputs), initial=0.0))

    def save_csv(self, path):
        with open(path, "w") as fh:
            cols = ([f"x{i}" for i in range(self.state_dim)]
                    + [f"u{i}" for i in range(self.input_dim)])
            fh.write("t," + ",".join(cols) + "\n")
            for t in range(self.horizon + 1):
                u = self.inputs[t] if t < self.horizon else np.zeros(self.input_dim)
                vals = [repr(float(v)) for v in np.concatenate([self.states[t], u])]
                fh.write(f"{t}," + ",".join(vals) + "\n")

    @classmethod
    def load_csv(cls, path, state_dim):
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        states = rows[:, 1:1 + state_dim]
        inputs = rows[:-1, 1 + state_dim:]
        return cls(states=states, inputs=inputs)


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, weights, terminal ingredients, and solver settings.

    ``q_terminal``/``alpha`` are usually filled in by
    :func:`terminal_ingredients`; ``tube_level`` must not exceed
    ``alpha`` (terminal-set membership of the predicted endpoint needs
    the level set inside the terminal set).
    """

    horizon: int
    q: np.ndarray
    r: np.ndarray
    q_terminal: np.ndarray | None = None
    alpha: float | None = None
    tube_level: float | None = None
    governor_horizon: int | None = None
    qp: QpConfig = field(default_factory=QpConfig)
    qf_scale: float = 1.05
    u_margin_fraction: float = 0.1
    x_margin: np.ndarray | None = None
    x_margin_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "q", _check_pd(self.q, "Q"))
        object.__setattr__(self, "r", _check_pd(self.r, "R"))
        if self.q_terminal is not None:
            object.__setattr__(self, "q_terminal", _check_pd(self.q_terminal, "Q_f"))
        if self.horizon < 1:
            raise ConfigurationError("horizon must be at least 1")
        if self.alpha is not None and self.tube_level is not None:
            if self.alpha < self.tube_level:
                raise ConfigurationError(
                    f"terminal level alpha={self.alpha} must dominate the tube "
                    f"level c={self.tube_level}")

    @property
    def effective_governor_horizon(self):
        return self.governor_horizon or self.horizon

    def with_terminal(self, ingredients, tube_level=None):
        c = tube_level if tube_level is not None else ingredients.alpha
        return replace(self, q_terminal=ingredients.q_terminal,
                       alpha=ingredients.alpha, tube_level=min(c, ingredients.alpha))


def _check_pd(matrix, name):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if np.max(np.abs(matrix - matrix.T), initial=0.0) > 1e-10:
        raise ConfigurationError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(matrix)) <= 0:
        raise ConfigurationError(f"{name} must be positive definite")
    return matrix


# ---------------------------------------------------------------------------
# Terminal ingredients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TerminalIngredients:
    q_terminal: np.ndarray
    alpha: float
    gain: np.ndarray            # terminal feedback u = -gain @ x


def linearize_at_origin(model):
    """(A, B) of the nominal dynamics around the origin."""
    if model.is_linear:
        return model.a_matrix, model.b_matrix
    zero_x = np.zeros(model.state_dim)
    zero_u = np.zeros(model.input_dim)
    a = finite_diff_jacobian(lambda x: model.nominal(x, zero_u), zero_x)
    b = finite_diff_jacobian(lambda u: model.nominal(zero_x, u), zero_u)
    return a, b


def terminal_ingredients(model, q, r, u_prime_bound, qf_scale=1.05):
    """Terminal cost, level, and feedback from the Riccati solution.

    The terminal cost is the (slightly inflated) solution of the
    discrete algebraic Riccati equation, which makes the local descent
    inequality hold with strictly positive margin away from the origin.
    The level is the largest sublevel set on which the Riccati feedback
    respects the tail input bound.
    """
    a, b = linearize_at_origin(model)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    try:
        p = scipy.linalg.solve_discrete_are(a, b, q, r)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise ConfigurationError(f"Riccati solve failed (unstabilizable model?): {exc}")
    gain = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
    q_terminal = qf_scale * p
    p_inv = np.linalg.inv(q_terminal)
    # per input row: max |gain_r x| over {x' Qf x <= alpha} is
    # sqrt(alpha * gain_r Qf^-1 gain_r'), solve for the binding level;
    # zero rows (deadbeat-trivial feedback) never bind
    levels = [
        u_prime_bound**2 / float(row @ p_inv @ row)
        for row in np.atleast_2d(gain)
        if float(row @ p_inv @ row) > 1e-300
    ]
    alpha = float(min(levels)) if levels else 1.0
    return TerminalIngredients(q_terminal=q_terminal, alpha=alpha, gain=gain)


@dataclass(frozen=True)
class ClfReport:
    passed: bool
    worst_margin: float
    violations: int
    samples: int


def verify_terminal_clf(model, cfg, ingredients, tight, n_samples=10000,
                        rng=None, slack=1e-9):
    """Sample the terminal set and check the local descent inequality.

    At each sample the candidate input is the terminal feedback clipped
    into the tail input box; the report carries the worst margin of
    ``c_f(x) - c_f(f(x,u')) - c_s(x,u')`` (nonnegative means pass).
    """
    rng = rng or np.random.default_rng(0)
    d = model.state_dim
    qf, alpha = ingredients.q_terminal, ingredients.alpha
    chol = np.linalg.cholesky(np.linalg.inv(qf))
    worst = np.inf
    violations = 0
    for i in range(n_samples):
        direction = rng.normal(size=d)
        direction /= np.linalg.norm(direction)
        # half the samples on the boundary, half strictly inside
        level = alpha if i % 2 == 0 else alpha * rng.uniform()
        x = np.sqrt(level) * (chol @ direction)
        u = np.clip(-ingredients.gain @ x, -tight.u_prime_bound, tight.u_prime_bound)
        x_next = model.nominal(x, u)
        stage = float(x @ cfg.q @ x + u @ cfg.r @ u)
        margin = float(x @ qf @ x - x_next @ qf @ x_next - stage)
        worst = min(worst, margin)
        if margin < -slack:
            violations += 1
    return ClfReport(passed=violations == 0, worst_margin=worst,
                     violations=violations, samples=n_samples)


# ---------------------------------------------------------------------------
# Reference governor
# ---------------------------------------------------------------------------

def solve_reference_governor(model, x0, cfg, tight):
    """Offline OCP: steer the nominal model from x0 to the origin.

    Minimizes the regulation cost over the governor horizon subject to
    the tightened state and input boxes and a hard terminal equality.
    Raises :class:`GovernorInfeasible` when no trajectory exists (too
    short a horizon or over-tight sets).
    """
    x0 = np.asarray(x0, dtype=float)
    n = cfg.effective_governor_horizon
    d, m = model.state_dim, model.input_dim
    if not tight.contains_reference_state(x0):
        raise GovernorInfeasible(
            f"initial state {x0} lies outside the tightened state box")
    zero_refs = np.zeros((n + 1, d))
    zero_inputs = np.zeros((n, m))
    bound = np.full((n, m), tight.u_r_bound)
    if model.is_linear:
        problem, pred = condense_linear_ocp(
            model.a_matrix, model.b_matrix, x0, zero_refs, zero_inputs,
            cfg.q, cfg.r, np.zeros((d, d)),
            -bound, bound, state_box=(tight.x_low, tight.x_high),
            terminal_equality=np.zeros(d))
        solution = solve_qp(problem, cfg.qp)
    else:
        nlp = NonlinearOcp(
            dynamics=model.nominal, x0=x0, horizon=n, q=cfg.q, r=cfg.r,
            q_terminal=np.zeros((d, d)), state_refs=zero_refs,
            input_refs=zero_inputs, input_lower=-bound, input_upper=bound,
            state_dim=d, input_dim=m, state_box=(tight.x_low, tight.x_high),
            terminal_equality=np.zeros(d))
        solution = sqp_solve(nlp)
    if solution.status == SolveStatus.INFEASIBLE:
        raise GovernorInfeasible(
            f"governor problem infeasible at horizon {n} "
            f"(input bound {tight.u_r_bound:.6g})")
    if solution.status != SolveStatus.OPTIMAL:
        raise GovernorInfeasible(
            f"governor solve did not converge (status {solution.status.value}, "
            f"primal residual {solution.primal_residual:.2e})")
    inputs = solution.z.reshape(n, m)
    states = [x0]
    for i in range(n):
        states.append(model.nominal(states[-1], inputs[i]))
    return ReferenceTrajectory(states=np.array(states), inputs=inputs)


# ---------------------------------------------------------------------------
# Online tracking MPC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrackingSolution:
    u_mpc: np.ndarray           # first optimal control
    value: float                # optimal tracking cost V_m
    predicted_next: np.ndarray  # nominal next state under u_mpc
    stage_cost: float           # c_s at the current state and first control
    solution: object            # underlying OcpSolution


def _reference_window(ref, t, horizon):
    states = np.array([ref.state(t + i) for i in range(horizon + 1)])
    inputs = np.array([ref.input(t + i) for i in range(horizon)])
    return states, inputs


def _input_boxes(u_shift, cfg, tight, m):
    lower = np.full((cfg.horizon, m), -tight.u_prime_bound)
    upper = np.full((cfg.horizon, m), tight.u_prime_bound)
    lower[0] = -tight.u_max - u_shift
    upper[0] = tight.u_max - u_shift
    return lower, upper


def _solve_tracking(model, x_init, u_shift, ref, t, cfg, tight):
    if cfg.q_terminal is None:
        raise ConfigurationError("terminal ingredients not set on the MPC config")
    x_init = np.asarray(x_init, dtype=float)
    u_shift = np.atleast_1d(np.asarray(u_shift, dtype=float))
    m = model.input_dim
    state_refs, input_refs = _reference_window(ref, t, cfg.horizon)
    lower, upper = _input_boxes(u_shift, cfg, tight, m)
    if model.is_linear:
        problem, _ = condense_linear_ocp(
            model.a_matrix, model.b_matrix, x_init, state_refs, input_refs,
            cfg.q, cfg.r, cfg.q_terminal, lower, upper)
        solution = solve_qp(problem, cfg.qp)
    else:
        nlp = NonlinearOcp(
            dynamics=model.nominal, x0=x_init, horizon=cfg.horizon,
            q=cfg.q, r=cfg.r, q_terminal=cfg.q_terminal,
            state_refs=state_refs, input_refs=input_refs,
            input_lower=lower, input_upper=upper,
            state_dim=model.state_dim, input_dim=m)
        solution = sqp_solve(nlp)
    if solution.status == SolveStatus.INFEASIBLE:
        # cannot happen with nonempty boxes; a real occurrence is a bug
        raise RuntimeError("tracking problem reported infeasible; "
                           "input boxes should never be empty")
    if solution.status == SolveStatus.MAX_ITER:
        logger.warning(
            "tracking solve hit max iterations at t=%d (kkt=%.2e); "
            "using best iterate", t, solution.kkt_residual)
    u_first = np.clip(solution.z[:m], lower[0], upper[0])
    return u_first, solution, state_refs, input_refs


def solve_tracking_mpc(model, x, u_adaptive, ref, t, cfg, tight):
    """Tracking MPC step aware of the adaptive input.

    The first-stage box is the admissible input set shifted by the
    adaptive component, so the applied total input is admissible by
    construction; later stages use the tail authority only.  Returns the
    first control, the optimal value, the nominal next-state prediction,
    and the realized stage cost.
    """
    u_first, solution, state_refs, input_refs = _solve_tracking(
        model, x, u_adaptive, ref, t, cfg, tight)
    ex = np.asarray(x, dtype=float) - state_refs[0]
    eu = u_first - input_refs[0]
    stage = float(ex @ cfg.q @ ex + eu @ cfg.r @ eu)
    return TrackingSolution(
        u_mpc=u_first,
        value=solution.value,
        predicted_next=model.nominal(x, u_first),
        stage_cost=stage,
        solution=solution,
    )


def solve_intermediate(model, x_predicted, ref, t, cfg, tight, u_adaptive_next):
    """Value of the tracking problem started from the predicted state.

    Identical to the online problem except the initial state is the
    one-step nominal prediction; the adaptive input entering the
    first-stage box is the one the controller actually uses at time t.
    Used by the per-step decrease diagnostics.
    """
    _, solution, _, _ = _solve_tracking(
        model, x_predicted, u_adaptive_next, ref, t, cfg, tight)
    return solution.value
