"""Numerical certification of the stability inequalities along traces.

Every checker is a pure function of a completed trajectory trace plus a
set of estimated constants; each carries an explicit slack so solver
tolerances do not masquerade as violations, and reports signed margins
so near-misses stay visible.  Checks needing the ground-truth output
weights run only on oracle scenarios where the uncertainty is linear in
known features by construction.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigurationError
from . import mpc as mpc_mod

TRACE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrajectoryTrace:
    """Per-step record of a simulation run (arrays indexed by step).

    ``states`` and ``k_snapshots`` have one extra row so the final
    post-step state and weights are available to the difference checks.
    ``u_tilde`` is the ground-truth apparent disturbance u_a + h, logged
    straight from the simulator's oracle access to h.
    """

    times: np.ndarray           # (T,)
    states: np.ndarray          # (T+1, d)
    ref_states: np.ndarray      # (T, d)
    u_adaptive: np.ndarray      # (T, m)
    u_mpc: np.ndarray           # (T, m)
    u_applied: np.ndarray       # (T, m)
    h_true: np.ndarray          # (T, m)
    u_tilde: np.ndarray         # (T, m)
    phi: np.ndarray             # (T, p)
    v_m: np.ndarray             # (T,)
    v_hat_next: np.ndarray      # (T,), NaN when not logged
    stage_cost: np.ndarray      # (T,)
    g_u_tilde_norm: np.ndarray  # (T,)
    k_snapshots: np.ndarray     # (T+1, p, m)
    generation: np.ndarray      # (T,)
    state_in_x: np.ndarray      # (T,) bool
    predicted_next: np.ndarray  # (T, d)

    def __len__(self):
        return self.times.size

    @property
    def input_dim(self):
        return self.u_applied.shape[1]

    def save(self, path):
        np.savez_compressed(path, format_version=TRACE_FORMAT_VERSION,
                            **{k: v for k, v in asdict(self).items()})

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            version = int(data["format_version"])
            if version != TRACE_FORMAT_VERSION:
                raise ConfigurationError(f"unsupported trace format {version}")
            fields = {k: data[k] for k in data.files if k != "format_version"}
        return cls(**fields)


@dataclass(frozen=True)
class CheckReport:
    """Outcome of one inequality check over a trace."""

    name: str
    passed: bool
    checked: int
    violations: int
    worst_margin: float         # signed; negative below -slack means violation
    worst_index: int | None = None
    vacuous: bool = False
    details: dict = field(default_factory=dict)

    def to_line(self):
        state = "VACUOUS" if self.vacuous else ("PASS" if self.passed else "FAIL")
        worst = "n/a" if not np.isfinite(self.worst_margin) else f"{self.worst_margin:.3e}"
        return (f"{self.name:<28s} {state:<7s} checked={self.checked:<6d} "
                f"violations={self.violations:<5d} worst_margin={worst}")


def _report(name, margins, slack, vacuous=False, details=None):
    margins = np.asarray(margins, dtype=float)
    if margins.size == 0:
        return CheckReport(name, passed=True, checked=0, violations=0,
                           worst_margin=np.inf, vacuous=vacuous,
                           details=details or {})
    violations = int(np.sum(margins < -slack))
    worst = int(np.argmin(margins))
    return CheckReport(name, passed=violations == 0, checked=margins.size,
                       violations=violations, worst_margin=float(margins[worst]),
                       worst_index=worst, vacuous=vacuous, details=details or {})


# ---------------------------------------------------------------------------
# Stability constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityConstants:
    """Every constant consumed by the trace checks.

    The adaptation bound constants come in two variants: the statement
    form (``c0``, ``c0_prime``) and the proof form carrying the extra
    1/m^2 factor (``c0_proof``, ``c0_prime_proof``).  The two disagree in
    the source analysis; both are exposed and reported rather than
    resolved.
    """

    c1: float
    c2: float
    c3: float
    c3_hat: float
    delta_g_hat: float
    gamma: float
    tube_level: float           # c
    c_bar: float
    c_hat: float
    beta: float
    a0: float
    eta: float
    c0: float
    c0_prime: float
    c0_proof: float
    c0_prime_proof: float
    theta: float
    sigma: float
    input_dim: int
    w_prime: float
    w_bar: float                # sum of squared column bounds


def derive_constants(*, c1, c2, c3, theta, sigma, input_dim, w_prime,
                     tube_level, w_bar, delta_g, c3_hat=None,
                     delta_g_hat=None, beta=0.0, c_hat=None):
    """Assemble the derived constants from the estimated primitives."""
    if not (c2 > c1 > 0):
        raise ConfigurationError(f"need c2 > c1 > 0, got c1={c1}, c2={c2}")
    if not (0 < theta < 1):
        raise ConfigurationError("theta must lie in (0, 1)")
    gamma = 1.0 - c1 / c2
    c3_hat = c3 if c3_hat is None else c3_hat
    delta_g_hat = delta_g if delta_g_hat is None else delta_g_hat
    c_bar = c2 * c3 * w_prime / c1
    if c_hat is None:
        c_hat = min(c_bar, tube_level)
    a0 = 2.0 * (c3_hat * delta_g_hat * sigma) ** 2 / (1.0 - theta)
    eta = ((1.0 - 2.0 * gamma**2) * c1**2
           - 2.0 * (sigma * c3_hat * delta_g_hat * beta / input_dim) ** 2
           / (1.0 - theta))
    c0 = sigma**2 / (1.0 - theta)
    c0_proof = sigma**2 / ((1.0 - theta) * input_dim**2)
    return StabilityConstants(
        c1=c1, c2=c2, c3=c3, c3_hat=c3_hat, delta_g_hat=delta_g_hat,
        gamma=gamma, tube_level=tube_level, c_bar=c_bar, c_hat=c_hat,
        beta=beta, a0=a0, eta=eta,
        c0=c0, c0_prime=4.0 * c0 * w_bar / theta,
        c0_proof=c0_proof,
        c0_prime_proof=4.0 * c0_proof * input_dim**2 * w_bar / theta,
        theta=theta, sigma=sigma, input_dim=input_dim,
        w_prime=w_prime, w_bar=w_bar)


def estimate_value_bounds(q, q_terminal, horizon, rate):
    """Closed-form sandwich constants for the tracking value function.

    ``c1`` is the smallest eigenvalue of the stage weight; ``c2``
    accumulates the worst-case spread of the reference-control rollout:
    ``rate^N max_eig(Qf) + sum_i rate^i max_eig(Q)``.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    q_terminal = np.atleast_2d(np.asarray(q_terminal, dtype=float))
    c1 = float(np.min(np.linalg.eigvalsh(q)))
    c2 = float(rate**horizon * np.max(np.linalg.eigvalsh(q_terminal))
               + mpc_mod.growth_sum(rate, horizon) * np.max(np.linalg.eigvalsh(q)))
    if c2 <= c1:
        raise ConfigurationError(f"value bounds degenerate: c1={c1}, c2={c2}")
    return c1, c2


def estimate_lipschitz_c3(model, cfg, tight, region_low, region_high,
                          n_samples=2000, rng=None, inflation=1.2,
                          n_controls=8):
    """Sampled Lipschitz constant of the tracking cost in its state argument.

    Evaluates the rollout cost (regulation references) at state pairs
    under shared admissible control sequences and takes the worst
    difference quotient, mixing far-apart pairs with local perturbation
    pairs, then inflates the estimate.
    """
    rng = rng or np.random.default_rng(0)
    region_low = np.asarray(region_low, dtype=float)
    region_high = np.asarray(region_high, dtype=float)
    d, m = model.state_dim, model.input_dim
    horizon = cfg.horizon
    if cfg.q_terminal is None:
        raise ConfigurationError("terminal ingredients not set")

    def rollout_cost(x, controls):
        total = 0.0
        for i in range(horizon):
            total += x @ cfg.q @ x + controls[i] @ cfg.r @ controls[i]
            x = model.nominal(x, controls[i])
        return float(total + x @ cfg.q_terminal @ x)

    scale = np.max(region_high - region_low)
    worst = 0.0
    for s in range(n_samples):
        x1 = rng.uniform(region_low, region_high)
        if s % 2 == 0:
            x2 = rng.uniform(region_low, region_high)
        else:
            x2 = np.clip(x1 + 1e-4 * scale * rng.normal(size=d),
                         region_low, region_high)
        gap = np.linalg.norm(x1 - x2)
        if gap < 1e-12:
            continue
        for _ in range(n_controls):
            controls = rng.uniform(-tight.u_max, tight.u_max, size=(horizon, m))
            quotient = abs(rollout_cost(x1, controls) - rollout_cost(x2, controls)) / gap
            worst = max(worst, quotient)
    return inflation * worst


def estimate_beta(trace, w_star, start=0):
    """Small-gain coefficient of the reconstruction error.

    Least squares through the origin of ||eps_j(x)|| against ||x||^2;
    the largest pointwise ratio is reported alongside for reference.
    """
    w_star = np.atleast_2d(np.asarray(w_star, dtype=float))
    eps = trace.h_true[start:] - trace.phi[start:] @ w_star
    eps_norm = np.linalg.norm(eps, axis=1)
    x_sq = np.sum(trace.states[start:len(trace)] ** 2, axis=1)
    denom = float(np.sum(x_sq**2))
    if denom < 1e-300:
        return 0.0, {"max_ratio": 0.0}
    beta = float(np.sum(eps_norm * x_sq) / denom)
    nonzero = x_sq > 1e-150
    max_ratio = float(np.max(eps_norm[nonzero] / x_sq[nonzero], initial=0.0))
    return beta, {"max_ratio": max_ratio}


# ---------------------------------------------------------------------------
# Adaptation checks (need the ground-truth output weights)
# ---------------------------------------------------------------------------

def va(k_matrix, w_star, theta):
    """Adaptation Lyapunov value: scaled squared weight error."""
    diff = np.atleast_2d(k_matrix) - np.atleast_2d(w_star)
    return float(np.sum(diff**2) / theta)


def va_series(trace, w_star, theta):
    diff = trace.k_snapshots - np.atleast_2d(w_star)[None, :, :]
    return np.sum(diff**2, axis=(1, 2)) / theta


def check_va_bound(trace, w_star, theta, w_bar, slack=1e-9):
    """Weight-error value stays below 4 * w_bar / theta at every step."""
    series = va_series(trace, w_star, theta)
    bound = 4.0 * w_bar / theta
    return _report("va_bound", bound - series, slack,
                   details={"bound": bound, "max_va": float(series.max())})


def check_va_decrease(trace, w_star, theta, sigma, slack=1e-9):
    """Per-step drift bound on the weight-error value.

    Statement variant: drift <= -(1-theta)/sigma^2 ||u_tilde||^2 + ||eps||^2.
    The proof variant scales the error term by 1/m^2; both are evaluated
    and the discrepancy is surfaced, not resolved.
    """
    series = va_series(trace, w_star, theta)
    drift = np.diff(series)
    u_sq = np.sum(trace.u_tilde**2, axis=1)
    eps = trace.h_true - trace.phi @ np.atleast_2d(w_star)
    eps_sq = np.sum(eps**2, axis=1)
    m = trace.input_dim
    bound_statement = -(1.0 - theta) / sigma**2 * u_sq + eps_sq
    bound_proof = -(1.0 - theta) / sigma**2 * u_sq + eps_sq / m**2
    margins = bound_statement - drift
    proof_report = _report("va_decrease_proof_variant", bound_proof - drift, slack)
    return _report("va_decrease", margins, slack, details={
        "proof_variant_violations": proof_report.violations,
        "proof_variant_worst_margin": proof_report.worst_margin,
    })


def check_mean_square_small(trace, window, mu, constants, slack=1e-9,
                            use_proof_variant=False):
    """Windowed energy bound on the apparent disturbance u_tilde.

    Every length-``window`` sum of ||u_tilde||^2 must stay below
    ``window * c0 * mu + c0_prime``.  With ``mu=None`` (no ground truth
    for the reconstruction error) the check turns informational: it
    reports the smallest mu for which every window would pass.
    """
    if len(trace) < window:
        raise ConfigurationError("trace shorter than the requested window")
    c0 = constants.c0_proof if use_proof_variant else constants.c0
    c0_prime = constants.c0_prime_proof if use_proof_variant else constants.c0_prime
    u_sq = np.sum(trace.u_tilde**2, axis=1)
    sums = np.convolve(u_sq, np.ones(window), mode="valid")
    variant = "proof" if use_proof_variant else "statement"
    if mu is None:
        implied_mu = float(max(0.0, (sums.max() - c0_prime) / (window * c0)))
        return CheckReport("mean_square_small", passed=True,
                           checked=sums.size, violations=0,
                           worst_margin=np.inf,
                           details={"implied_mu": implied_mu,
                                    "worst_sum": float(sums.max()),
                                    "variant": variant,
                                    "informational": True})
    bound = window * c0 * mu + c0_prime
    return _report("mean_square_small", bound - sums, slack,
                   details={"bound": float(bound), "worst_sum": float(sums.max()),
                            "variant": variant})


# ---------------------------------------------------------------------------
# Value-function checks (oracle-free)
# ---------------------------------------------------------------------------

def check_value_sandwich(trace, constants, slack=1e-9):
    """c1 ||x - xr||^2 <= V_m <= c2 ||x - xr||^2 along the trace."""
    err_sq = np.sum((trace.states[:len(trace)] - trace.ref_states) ** 2, axis=1)
    lower_margin = trace.v_m - constants.c1 * err_sq
    upper_margin = constants.c2 * err_sq - trace.v_m
    margins = np.minimum(lower_margin, upper_margin)
    return _report("value_sandwich", margins, slack)


def check_iss(trace, constants, slack=1e-7):
    """Per-step ISS decrease plus its two decomposed halves.

    (i) intermediate-value drop by at least the stage cost, (iii) the
    disturbance jump bounded by c3 ||g u_tilde||, (iv) the combined
    geometric decrease with gamma = 1 - c1/c2.
    """
    t_count = len(trace)
    logged = np.isfinite(trace.v_hat_next)
    margins_i, margins_iii, margins_iv = [], [], []
    for t in range(t_count):
        if logged[t]:
            margins_i.append(-trace.stage_cost[t]
                             - (trace.v_hat_next[t] - trace.v_m[t]))
        if t + 1 < t_count:
            jump_bound = constants.c3 * trace.g_u_tilde_norm[t]
            if logged[t]:
                margins_iii.append(jump_bound
                                   - (trace.v_m[t + 1] - trace.v_hat_next[t]))
            margins_iv.append(constants.gamma * trace.v_m[t] + jump_bound
                              - trace.v_m[t + 1])
    rep_i = _report("iss_intermediate_drop", margins_i, slack)
    rep_iii = _report("iss_disturbance_jump", margins_iii, slack)
    rep_iv = _report("iss_geometric", margins_iv, slack)
    combined_margins = np.concatenate([
        np.asarray(m, dtype=float) for m in (margins_i, margins_iii, margins_iv)
    ]) if t_count else np.array([])
    report = _report("iss", combined_margins, slack, details={
        "intermediate_drop": rep_i,
        "disturbance_jump": rep_iii,
        "geometric": rep_iv,
    })
    return report


def tube_report(trace, constants, start=None, slack=1e-7):
    """Invariant/attractive tube classification for the regulation phase.

    Requires the smallness precondition w_prime < (c1/(c2 c3)) c; when it
    fails the result is explicitly vacuous.  Otherwise classifies each
    step against the attractive level c_bar and the tube level c, checks
    the strict decrease on the ring, invariance of the attractive set,
    and admissibility of the visited states.
    """
    if start is None:
        start = 0
    threshold = constants.c1 * constants.tube_level / (constants.c2 * constants.c3)
    if constants.w_prime >= threshold:
        return CheckReport(
            "tube", passed=True, checked=0, violations=0, worst_margin=np.inf,
            vacuous=True,
            details={"reason": f"precondition w_prime < c1*c/(c2*c3) fails "
                               f"({constants.w_prime:.3e} >= {threshold:.3e})"})
    margins = []
    inside_attractive = ring = outside = x_violations = 0
    for t in range(start, len(trace) - 1):
        v_now, v_next = trace.v_m[t], trace.v_m[t + 1]
        if v_now <= constants.c_bar:
            inside_attractive += 1
            margins.append(constants.c_bar - v_next)      # invariance (ii)
        elif v_now <= constants.tube_level:
            ring += 1
            margins.append(v_now - v_next)                # strict decrease (i)
        else:
            outside += 1
        if not trace.state_in_x[t]:
            x_violations += 1
            margins.append(-np.inf)
    return _report("tube", margins, slack, details={
        "inside_attractive": inside_attractive, "ring": ring,
        "outside_tube": outside, "state_violations": x_violations,
        "c_bar": constants.c_bar, "tube_level": constants.tube_level})


def theorem1_check(trace, constants, w_star, slack=1e-6, start=None):
    """Composite Lyapunov decrease and summability under the gate conditions.

    Verifies the hypothesis gates (contraction strength, reconstruction
    small-gain, disturbance smallness), then the per-step decrease of
    ``V_m^2 + a0 V_a`` by at least eta ||x||^4, and the tail summability
    proxy.  Skips (vacuously) when the gates fail or the trace never
    enters the inner level set.
    """
    gates = {
        "gamma_sq_lt_half": constants.gamma**2 < 0.5,
        "beta_gate": constants.beta < (
            constants.c1 * constants.input_dim
            / (np.sqrt(2.0) * constants.sigma * constants.c3_hat
               * constants.delta_g_hat)
            * np.sqrt((1.0 - 2.0 * constants.gamma**2) * (1.0 - constants.theta))),
        "w_prime_gate": constants.w_prime < (
            constants.c1 * constants.tube_level / (constants.c2 * constants.c3)),
    }
    if not (gates["gamma_sq_lt_half"] and gates["beta_gate"]):
        return CheckReport("theorem1", passed=True, checked=0, violations=0,
                           worst_margin=np.inf, vacuous=True,
                           details={"reason": "hypotheses not met", "gates": gates})
    if start is None:
        inside = np.nonzero(trace.v_m <= constants.c_hat)[0]
        if inside.size == 0:
            return CheckReport("theorem1", passed=True, checked=0, violations=0,
                               worst_margin=np.inf, vacuous=True,
                               details={"reason": "trace never enters the inner "
                                        "level set", "gates": gates})
        start = int(inside[0])
    va_vals = va_series(trace, w_star, constants.theta)
    x_fourth = np.sum(trace.states[:len(trace)] ** 2, axis=1) ** 2
    composite = trace.v_m**2 + constants.a0 * va_vals[:len(trace)]
    composite_next = np.empty(len(trace))
    composite_next[:-1] = composite[1:]
    composite_next[-1] = np.nan
    margins = []
    for t in range(start, len(trace) - 1):
        decrease = composite_next[t] - composite[t]
        margins.append(-constants.eta * x_fourth[t] - decrease)
    tail_sum = float(np.sum(x_fourth[start:]))
    tail_bound = float((constants.c_hat**2
                        + 4.0 * constants.a0 * constants.w_bar / constants.theta)
                       / constants.eta)
    tail_ok = tail_sum <= tail_bound + slack
    report = _report("theorem1", margins, slack, details={
        "gates": gates, "start": start, "tail_sum": tail_sum,
        "tail_bound": tail_bound, "tail_ok": tail_ok})
    if not tail_ok:
        report = CheckReport(report.name, passed=False, checked=report.checked,
                             violations=report.violations + 1,
                             worst_margin=min(report.worst_margin,
                                              tail_bound - tail_sum),
                             worst_index=report.worst_index,
                             details=report.details)
    return report


def check_constraint_satisfaction(trace, u_max, slack=0.0):
    """Hard admissibility of applied inputs; state violations as a rate.

    Input bounds are enforced by construction, so any excursion fails
    the check outright; state-box violations are expected under strong
    disturbances and are only tallied.
    """
    margins = u_max + slack - np.max(np.abs(trace.u_applied), axis=1)
    in_x = float(np.mean(trace.state_in_x)) if len(trace) else 1.0
    return _report("constraint_satisfaction", margins, 0.0,
                   details={"state_in_x_fraction": in_x,
                            "state_violations": int(np.sum(~trace.state_in_x))})


def check_convergence(trace, threshold=1e-3, fraction=0.1):
    """Desk-scale convergence proxy: ||x|| below threshold on the last window."""
    t_count = len(trace)
    window = max(1, int(np.ceil(fraction * t_count)))
    norms = np.linalg.norm(trace.states[t_count - window:t_count], axis=1)
    margins = threshold - norms
    return _report("convergence", margins, 0.0,
                   details={"window": window, "threshold": threshold,
                            "final_mean": float(norms.mean())})
