"""Constrained-optimization backend for the control problems.

A dense operator-splitting QP solver with an active-set polishing step
handles the condensed linear problems; a single-shooting SQP wrapper
extends it to nonlinear control-affine dynamics.  Problems here are
small (tens of variables), so everything is dense and deterministic.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigurationError


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class QpProblem:
    """Canonical convex QP: min 0.5 z'Pz + q'z + const s.t. l <= Az <= u.

    Equalities are encoded as rows with ``l == u``.  ``constant`` carries
    objective offsets dropped by condensing, so reported values match the
    original optimal-control cost exactly.
    """

    p_matrix: np.ndarray
    q_vector: np.ndarray
    a_matrix: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    constant: float = 0.0

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.p_matrix, dtype=float))
        q = np.asarray(self.q_vector, dtype=float)
        a = np.asarray(self.a_matrix, dtype=float).reshape(-1, p.shape[0])
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if np.max(np.abs(p - p.T), initial=0.0) > 1e-10:
            raise ConfigurationError("cost matrix must be symmetric (within 1e-10)")
        p = 0.5 * (p + p.T)
        if lo.shape != (a.shape[0],) or hi.shape != (a.shape[0],):
            raise ConfigurationError("constraint bounds must match the row count")
        if np.any(lo > hi):
            raise ConfigurationError("constraint bounds must satisfy l <= u")
        object.__setattr__(self, "p_matrix", p)
        object.__setattr__(self, "q_vector", q)
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def n(self):
        return self.q_vector.size

    @property
    def k(self):
        return self.a_matrix.shape[0]

    def objective(self, z):
        return float(0.5 * z @ self.p_matrix @ z + self.q_vector @ z + self.constant)

    def to_debug_text(self):
        """Plain-text dump for failure triage."""
        with np.printoptions(precision=17, linewidth=200, threshold=10**6):
            return (f"n={self.n} k={self.k} constant={self.constant!r}\n"
                    f"P=\n{self.p_matrix}\nq=\n{self.q_vector}\n"
                    f"A=\n{self.a_matrix}\nl=\n{self.lower}\nu=\n{self.upper}\n")


@dataclass(frozen=True)
class QpConfig:
    tol: float = 1e-8
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6             # over-relaxation
    check_interval: int = 10
    polish_threshold: float = 1e-4  # residual level at which polishing is attempted
    infeasibility_tol: float = 1e-12


@dataclass(frozen=True)
class OcpSolution:
    z: np.ndarray
    value: float
    status: SolveStatus
    primal_residual: float
    dual_residual: float
    complementarity: float
    iterations: int
    y: np.ndarray | None = None

    @property
    def kkt_residual(self):
        return max(self.primal_residual, self.dual_residual, self.complementarity)


def _residuals(problem, z, y):
    az = problem.a_matrix @ z
    primal = float(np.max(np.maximum(problem.lower - az, az - problem.upper),
                          initial=0.0))
    dual = float(np.max(np.abs(problem.p_matrix @ z + problem.q_vector
                               + problem.a_matrix.T @ y), initial=0.0))
    # complementarity: multiplier magnitude times distance to the bound it
    # should be pinning
    comp = 0.0
    for i in range(problem.k):
        if y[i] > 0:
            comp = max(comp, y[i] * abs(problem.upper[i] - az[i]))
        elif y[i] < 0:
            comp = max(comp, -y[i] * abs(az[i] - problem.lower[i]))
    return primal, dual, comp


def _polish(problem, z, y, tol):
    """Equality-solve on the active set guessed from the ADMM iterate."""
    az = problem.a_matrix @ z
    act_tol = np.sqrt(tol)
    lower_active = (az - problem.lower < act_tol) & (y < act_tol)
    upper_active = (problem.upper - az < act_tol) & (y > -act_tol)
    active = lower_active | upper_active
    bound = np.where(upper_active & ~lower_active, problem.upper, problem.lower)
    # equality rows are always active at their common bound
    eq = problem.lower == problem.upper
    active |= eq
    bound = np.where(eq, problem.lower, bound)
    a_act = problem.a_matrix[active]
    n_act = a_act.shape[0]
    kkt = np.block([
        [problem.p_matrix, a_act.T],
        [a_act, -1e-12 * np.eye(n_act)],
    ])
    rhs = np.concatenate([-problem.q_vector, bound[active]])
    try:
        lu, piv = scipy.linalg.lu_factor(kkt)
        sol = scipy.linalg.lu_solve((lu, piv), rhs)
        # one round of iterative refinement tightens the residual
        sol += scipy.linalg.lu_solve((lu, piv), rhs - kkt @ sol)
    except (scipy.linalg.LinAlgError, ValueError):
        return None
    z_pol = sol[:problem.n]
    y_pol = np.zeros(problem.k)
    y_pol[active] = sol[problem.n:]
    return z_pol, y_pol


def _is_primal_infeasible(problem, delta_y, tol):
    norm = np.max(np.abs(delta_y), initial=0.0)
    if norm <= tol:
        return False
    dy = delta_y / norm
    if np.max(np.abs(problem.a_matrix.T @ dy), initial=0.0) > 1e-8:
        return False
    support = float(problem.upper @ np.maximum(dy, 0.0)
                    + problem.lower @ np.minimum(dy, 0.0))
    return support < -1e-8


def solve_qp(problem, config=None, z0=None, y0=None):
    """Operator-splitting solve with active-set polishing.

    OPTIMAL status guarantees every KKT residual is at or below
    ``config.tol``.  The method is fully deterministic: identical inputs
    yield identical iterates and iteration counts.
    """
    config = config or QpConfig()
    n, k = problem.n, problem.k
    if k == 0:
        z = np.linalg.solve(problem.p_matrix, -problem.q_vector)
        return OcpSolution(z, problem.objective(z), SolveStatus.OPTIMAL,
                           0.0, 0.0, 0.0, 0, y=np.zeros(0))
    sigma, alpha = config.sigma, config.alpha
    # per-row penalty: equality rows get a much stiffer weight, which is
    # the standard cure for slow equality convergence in splitting methods
    rho = np.full(k, config.rho)
    rho[problem.lower == problem.upper] *= 1e3
    kkt = (problem.p_matrix + sigma * np.eye(n)
           + problem.a_matrix.T @ (rho[:, None] * problem.a_matrix))
    chol = scipy.linalg.cho_factor(kkt)
    z = np.zeros(n) if z0 is None else np.asarray(z0, dtype=float).copy()
    zc = np.clip(problem.a_matrix @ z, problem.lower, problem.upper)
    y = np.zeros(k) if y0 is None else np.asarray(y0, dtype=float).copy()
    best = None
    for it in range(1, config.max_iter + 1):
        rhs = sigma * z - problem.q_vector + problem.a_matrix.T @ (rho * zc - y)
        z_tilde = scipy.linalg.cho_solve(chol, rhs)
        az_tilde = problem.a_matrix @ z_tilde
        z = alpha * z_tilde + (1 - alpha) * z
        relaxed = alpha * az_tilde + (1 - alpha) * zc
        zc_new = np.clip(relaxed + y / rho, problem.lower, problem.upper)
        y_new = y + rho * (relaxed - zc_new)
        delta_y = y_new - y
        zc, y = zc_new, y_new
        if it % config.check_interval == 0 or it == config.max_iter:
            primal, dual, comp = _residuals(problem, z, y)
            kkt_res = max(primal, dual, comp)
            if best is None or kkt_res < best[0]:
                best = (kkt_res, z.copy(), y.copy(), primal, dual, comp, it)
            if kkt_res <= config.tol:
                return OcpSolution(z, problem.objective(z), SolveStatus.OPTIMAL,
                                   primal, dual, comp, it, y=y)
            if kkt_res <= config.polish_threshold:
                polished = _polish(problem, z, y, config.tol)
                if polished is not None:
                    pz, py = polished
                    pp, pd, pc = _residuals(problem, pz, py)
                    if max(pp, pd, pc) <= config.tol:
                        return OcpSolution(pz, problem.objective(pz),
                                           SolveStatus.OPTIMAL, pp, pd, pc, it, y=py)
            if _is_primal_infeasible(problem, delta_y, config.infeasibility_tol):
                return OcpSolution(z, np.inf, SolveStatus.INFEASIBLE,
                                   primal, dual, comp, it, y=y)
    kkt_res, z, y, primal, dual, comp, it = best
    return OcpSolution(z, problem.objective(z), SolveStatus.MAX_ITER,
                       primal, dual, comp, it, y=y)


# ---------------------------------------------------------------------------
# Condensing: eliminate states so the decision variable is the control
# sequence alone.  Small horizons and dense matrices make this the
# simplest fast option; for large state_dim * horizon a sparse multiple
# shooting formulation would win instead.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearPrediction:
    """Stacked prediction x_{1..N} = phi @ x0 + gamma @ u + offset."""

    phi: np.ndarray
    gamma: np.ndarray
    offset: np.ndarray
    state_dim: int
    input_dim: int
    horizon: int

    def states(self, x0, u_flat):
        stacked = self.phi @ x0 + self.gamma @ u_flat + self.offset
        return stacked.reshape(self.horizon, self.state_dim)


def linear_prediction(a, b, horizon, offsets=None):
    """Prediction matrices for ``x_{i+1} = A x_i + B u_i (+ c_i)``.

    ``a`` and ``b`` may be single matrices or per-stage lists (the SQP
    path linearizes around a trajectory, so it needs time-varying ones);
    ``offsets`` are optional per-stage affine terms.
    """
    a_list = list(a) if isinstance(a, (list, tuple)) else [a] * horizon
    b_list = list(b) if isinstance(b, (list, tuple)) else [b] * horizon
    d, m = np.asarray(b_list[0]).shape
    phi = np.zeros((horizon * d, d))
    gamma = np.zeros((horizon * d, horizon * m))
    offset = np.zeros(horizon * d)
    running = np.eye(d)
    running_offset = np.zeros(d)
    for i in range(horizon):
        a_i = np.asarray(a_list[i], dtype=float)
        b_i = np.asarray(b_list[i], dtype=float)
        running = a_i @ running
        running_offset = a_i @ running_offset
        if offsets is not None:
            running_offset = running_offset + np.asarray(offsets[i], dtype=float)
        rows = slice(i * d, (i + 1) * d)
        phi[rows] = running
        offset[rows] = running_offset
        gamma[rows, i * m:(i + 1) * m] = b_i
        for j in range(i):
            block = gamma[(i - 1) * d:i * d, j * m:(j + 1) * m]
            gamma[rows, j * m:(j + 1) * m] = a_i @ block
    return LinearPrediction(phi, gamma, offset, d, m, horizon)


def condense_linear_ocp(a, b, x0, state_refs, input_refs, q, r, q_terminal,
                        input_lower, input_upper, state_box=None,
                        terminal_equality=None, offsets=None):
    """Condense a linear tracking OCP into a :class:`QpProblem`.

    Cost: sum_i ||x_i - xr_i||_Q^2 + ||u_i - ur_i||_R^2 over stages
    0..N-1 plus ||x_N - xr_N||_{Qf}^2.  The stage-0 state term is a
    constant and lands in the problem's ``constant`` so reported values
    equal full rollout costs.  Constraint rows: per-stage input boxes
    (always), state boxes for stages 1..N-1 (optional), and a terminal
    equality on x_N (optional).

    Returns (problem, prediction).
    """
    x0 = np.asarray(x0, dtype=float)
    state_refs = np.atleast_2d(np.asarray(state_refs, dtype=float))
    input_refs = np.atleast_2d(np.asarray(input_refs, dtype=float))
    horizon = input_refs.shape[0]
    if state_refs.shape[0] != horizon + 1:
        raise ConfigurationError("need horizon+1 state references")
    pred = linear_prediction(a, b, horizon, offsets=offsets)
    d, m = pred.state_dim, pred.input_dim
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    q_terminal = np.atleast_2d(np.asarray(q_terminal, dtype=float))

    # Stacked state cost: Q for predicted stages 1..N-1, Qf at N.
    q_blocks = [q] * (horizon - 1) + [q_terminal]
    q_bar = scipy.linalg.block_diag(*q_blocks)
    r_bar = scipy.linalg.block_diag(*([r] * horizon))
    xr_flat = state_refs[1:].reshape(-1)
    ur_flat = input_refs.reshape(-1)

    base = pred.phi @ x0 + pred.offset            # state prediction at u = 0
    err0 = base - xr_flat
    p_matrix = 2.0 * (pred.gamma.T @ q_bar @ pred.gamma + r_bar)
    q_vector = 2.0 * (pred.gamma.T @ q_bar @ err0 - r_bar @ ur_flat)
    constant = float(err0 @ q_bar @ err0 + ur_flat @ r_bar @ ur_flat
                     + (x0 - state_refs[0]) @ q @ (x0 - state_refs[0]))

    rows = [np.eye(horizon * m)]
    lower = [np.asarray(input_lower, dtype=float).reshape(-1)]
    upper = [np.asarray(input_upper, dtype=float).reshape(-1)]
    if state_box is not None and horizon > 1:
        box_low, box_high = state_box
        sel = pred.gamma[:(horizon - 1) * d]
        rows.append(sel)
        lower.append(np.tile(box_low, horizon - 1) - base[:(horizon - 1) * d])
        upper.append(np.tile(box_high, horizon - 1) - base[:(horizon - 1) * d])
    if terminal_equality is not None:
        target = np.asarray(terminal_equality, dtype=float)
        sel = pred.gamma[(horizon - 1) * d:]
        rows.append(sel)
        lower.append(target - base[(horizon - 1) * d:])
        upper.append(target - base[(horizon - 1) * d:])
    problem = QpProblem(p_matrix, q_vector, np.vstack(rows),
                        np.concatenate(lower), np.concatenate(upper), constant)
    return problem, pred


def finite_diff_jacobian(fn, z, eps=1e-6):
    """Central-difference Jacobian of ``fn`` at ``z``, column by column."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    z = np.asarray(z, dtype=float)
    f0 = np.atleast_1d(np.asarray(fn(z), dtype=float))
    jac = np.zeros((f0.size, z.size))
    for j in range(z.size):
        dz = np.zeros_like(z)
        dz[j] = eps
        jac[:, j] = (np.atleast_1d(fn(z + dz)) - np.atleast_1d(fn(z - dz))) / (2 * eps)
    return jac


# ---------------------------------------------------------------------------
# SQP for nonlinear control-affine dynamics (single shooting).
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NonlinearOcp:
    """Tracking OCP over general nominal dynamics ``x+ = dynamics(x, u)``."""

    dynamics: object
    x0: np.ndarray
    horizon: int
    q: np.ndarray
    r: np.ndarray
    q_terminal: np.ndarray
    state_refs: np.ndarray          # (horizon+1, d)
    input_refs: np.ndarray          # (horizon, m)
    input_lower: np.ndarray         # (horizon, m)
    input_upper: np.ndarray
    state_dim: int
    input_dim: int
    state_box: tuple | None = None          # (low, high) for stages 1..N-1
    terminal_equality: np.ndarray | None = None

    def rollout(self, u_flat):
        u = u_flat.reshape(self.horizon, self.input_dim)
        xs = [np.asarray(self.x0, dtype=float)]
        for i in range(self.horizon):
            xs.append(np.asarray(self.dynamics(xs[-1], u[i]), dtype=float))
        return np.array(xs)

    def cost(self, u_flat):
        u = u_flat.reshape(self.horizon, self.input_dim)
        xs = self.rollout(u_flat)
        total = 0.0
        for i in range(self.horizon):
            ex = xs[i] - self.state_refs[i]
            eu = u[i] - self.input_refs[i]
            total += ex @ self.q @ ex + eu @ self.r @ eu
        ef = xs[self.horizon] - self.state_refs[self.horizon]
        return float(total + ef @ self.q_terminal @ ef)


@dataclass(frozen=True)
class SqpConfig:
    step_tol: float = 1e-9
    max_iter: int = 40
    fd_eps: float = 1e-6
    qp: QpConfig = field(default_factory=QpConfig)


def sqp_solve(nlp, z0=None, config=None):
    """Sequential QP on the condensed control variables.

    Each iteration linearizes the dynamics along the current rollout,
    solves the condensed QP in absolute controls (affine offsets keep the
    linearization exact at the iterate), and takes the full step.  For
    linear dynamics the first QP is already exact.
    """
    config = config or SqpConfig()
    n = nlp.horizon * nlp.input_dim
    z = np.zeros(n) if z0 is None else np.asarray(z0, dtype=float).copy()
    z = np.clip(z, nlp.input_lower.reshape(-1), nlp.input_upper.reshape(-1))
    best_z, best_cost = z.copy(), nlp.cost(z)
    last = None
    for it in range(1, config.max_iter + 1):
        xs = nlp.rollout(z)
        u = z.reshape(nlp.horizon, nlp.input_dim)
        a_list, b_list, offs = [], [], []
        for i in range(nlp.horizon):
            a_i = finite_diff_jacobian(lambda x: nlp.dynamics(x, u[i]), xs[i], config.fd_eps)
            b_i = finite_diff_jacobian(lambda v: nlp.dynamics(xs[i], v), u[i], config.fd_eps)
            # affine remainder keeps x_{i+1} = A x + B u + c exact at the iterate
            offs.append(xs[i + 1] - a_i @ xs[i] - b_i @ u[i])
            a_list.append(a_i)
            b_list.append(b_i)
        problem, _ = condense_linear_ocp(
            a_list, b_list, nlp.x0, nlp.state_refs, nlp.input_refs,
            nlp.q, nlp.r, nlp.q_terminal,
            nlp.input_lower, nlp.input_upper, state_box=nlp.state_box,
            terminal_equality=nlp.terminal_equality, offsets=offs)
        sub = solve_qp(problem, config.qp)
        if sub.status == SolveStatus.INFEASIBLE:
            return OcpSolution(best_z, best_cost, SolveStatus.INFEASIBLE,
                               sub.primal_residual, sub.dual_residual,
                               sub.complementarity, it)
        step = float(np.max(np.abs(sub.z - z), initial=0.0))
        z = sub.z
        cost = nlp.cost(z)
        if cost <= best_cost:
            best_z, best_cost = z.copy(), cost
        last = sub
        if step <= config.step_tol:
            return OcpSolution(best_z, best_cost, SolveStatus.OPTIMAL,
                               last.primal_residual, last.dual_residual,
                               last.complementarity, it)
    return OcpSolution(best_z, best_cost, SolveStatus.MAX_ITER,
                       last.primal_residual, last.dual_residual,
                       last.complementarity, config.max_iter)
