"""Control-affine plant models, constraint sets, and the wing-rock benchmark.

The true dynamics are ``x+ = f(x) + g(x) (u + h(x))`` where ``h`` is a
matched uncertainty the controller never sees directly.  The nominal
dynamics drop the uncertainty term.  Models are immutable; every sampled
quantity takes an explicit random generator so simulations replay
bit-for-bit under a fixed seed.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, InputBoundViolation, SingularGainMatrix

# Numerical rank floor for g(x): smallest singular value must exceed this.
RANK_TOL = 1e-9


@dataclass(frozen=True)
class ControlAffineModel:
    """Discrete-time dynamics ``x+ = f(x) + g(x) u`` plus bound metadata.

    Attributes:
        state_dim: dimension of the state vector.
        input_dim: dimension of the input vector.
        f: drift map, state -> state.
        g: control influence map, state -> (state_dim, input_dim) matrix.
        delta_g: upper bound on the induced 2-norm of ``g(x)`` over the
            admissible states.
        lipschitz_f: Lipschitz constant of ``f``.
        lipschitz_g: Lipschitz constant of ``g``.
        a_matrix, b_matrix: set on the linear fast path (``f = A x``,
            ``g = B``); ``None`` for generic nonlinear models.
    """

    state_dim: int
    input_dim: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    delta_g: float
    lipschitz_f: float
    lipschitz_g: float
    a_matrix: np.ndarray | None = None
    b_matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.delta_g <= 0:
            raise ConfigurationError("delta_g must be positive")
        if self.lipschitz_f < 0 or self.lipschitz_g < 0:
            raise ConfigurationError("Lipschitz constants must be nonnegative")

    @classmethod
    def linear(cls, a, b):
        """Build the linear fast path ``x+ = A x + B u``.

        ``delta_g`` and ``lipschitz_f`` are exact for linear models:
        the induced 2-norms of B and A.
        """
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            b = b.reshape(-1, 1)
        d, m = b.shape
        if a.shape != (d, d):
            raise ConfigurationError(f"A must be {d}x{d}, got {a.shape}")
        return cls(
            state_dim=d,
            input_dim=m,
            f=lambda x, _a=a: _a @ x,
            g=lambda x, _b=b: _b,
            delta_g=float(np.linalg.norm(b, 2)),
            lipschitz_f=float(np.linalg.norm(a, 2)),
            lipschitz_g=0.0,
            a_matrix=a,
            b_matrix=b,
        )

    @property
    def is_linear(self):
        return self.a_matrix is not None

    def nominal(self, x, u):
        """Nominal next state ``f(x) + g(x) u``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return self.f(x) + self.g(x) @ u


@dataclass(frozen=True)
class ConstraintSets:
    """Admissible state box, input bound, and disturbance bound.

    The state set is a per-coordinate interval box; the input set is the
    infinity-norm ball of radius ``u_max``; the disturbance set is the
    2-norm ball of radius ``w_max`` in state space.
    """

    state_low: np.ndarray
    state_high: np.ndarray
    u_max: float
    w_max: float

    def __post_init__(self):
        lo = np.asarray(self.state_low, dtype=float)
        hi = np.asarray(self.state_high, dtype=float)
        object.__setattr__(self, "state_low", lo)
        object.__setattr__(self, "state_high", hi)
        if lo.shape != hi.shape:
            raise ConfigurationError("state box bounds have mismatched shapes")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ConfigurationError("state box must be compact (finite bounds)")
        if not np.all(hi > lo):
            raise ConfigurationError("state box is empty")
        if self.u_max <= 0 or self.w_max < 0:
            raise ConfigurationError("u_max must be positive and w_max nonnegative")

    def contains_state(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.state_low - tol) and np.all(x <= self.state_high + tol))

    def contains_input(self, u, tol=0.0):
        return bool(np.max(np.abs(np.asarray(u, dtype=float))) <= self.u_max + tol)

    def sample_state(self, rng, size=None):
        """Uniform samples from the state box."""
        if size is None:
            return rng.uniform(self.state_low, self.state_high)
        return rng.uniform(self.state_low, self.state_high, size=(size, self.state_low.size))


def saturate(v, threshold):
    """Standard saturation: clamp every entry of ``v`` to [-threshold, threshold]."""
    return np.clip(v, -threshold, threshold)


def eval_basis(x, saturation_threshold):
    """Saturated polynomial basis of the wing-rock uncertainty.

    For state ``x = (roll angle d, roll rate p)`` evaluates
    ``[1, d, p, |d| p, |p| p, d**3]`` and clamps every entry to the
    saturation threshold.  Note the constant leading entry is itself
    saturated, so it contributes the threshold value, not 1.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (2,):
        raise ValueError(f"wing-rock basis needs a 2-state input, got shape {x.shape}")
    d, p = x
    raw = np.array([1.0, d, p, abs(d) * p, abs(p) * p, d**3])
    return saturate(raw, saturation_threshold)


def truncated_normal(rng, half_width, size=None):
    """Zero-mean normal with sd ``half_width / 2`` rejected to the interval.

    Rejection resampling keeps redrawing out-of-range entries, so every
    sample lies in ``[-half_width, half_width]`` exactly.  With a scalar
    request the draw order matches repeated scalar calls on the same
    generator, which is what the simulation loop relies on.
    """
    if half_width == 0.0:
        return 0.0 if size is None else np.zeros(size)
    sd = half_width / 2.0
    if size is None:
        while True:
            v = rng.normal(0.0, sd)
            if abs(v) <= half_width:
                return float(v)
    out = rng.normal(0.0, sd, size=size)
    bad = np.abs(out) > half_width
    while np.any(bad):
        out[bad] = rng.normal(0.0, sd, size=int(bad.sum()))
        bad = np.abs(out) > half_width
    return out


@dataclass(frozen=True)
class UncertaintySpec:
    """Wing-rock style uncertainty ``h(x, t) = v(t) * V0 . basis(x) + noise``.

    The gain schedule ``v(t)`` is piecewise constant: explicit
    ``(start, end, gain)`` windows (end exclusive) take precedence; an
    optional alternating pattern ``(period, gain)`` covers all remaining
    times with gain active on even period indices; everywhere else the
    gain is zero.

    Attributes:
        basis_weights: the 6-vector of basis weights (V0).
        gain_windows: explicit schedule windows.
        alternating: optional (period, gain) alternating pattern.
        noise_half_width: truncation bound of the additive noise.
        saturation_threshold: basis clamp level; the benchmark uses
            noise_half_width / 5.
    """

    basis_weights: np.ndarray
    gain_windows: tuple = ()
    alternating: tuple | None = None
    noise_half_width: float = 0.0
    saturation_threshold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "basis_weights",
                           np.asarray(self.basis_weights, dtype=float))
        if self.noise_half_width < 0:
            raise ConfigurationError("noise_half_width must be nonnegative")
        if self.saturation_threshold < 0:
            raise ConfigurationError("saturation_threshold must be nonnegative")

    @property
    def input_dim(self):
        return 1

    def gain(self, t):
        """Gain schedule value v(t)."""
        for start, end, gain in self.gain_windows:
            if start <= t < end:
                return float(gain)
        if self.alternating is not None:
            period, gain = self.alternating
            if (t // period) % 2 == 0:
                return float(gain)
        return 0.0

    def all_gains(self):
        """Every gain value the schedule can produce (including zero)."""
        gains = {0.0}
        gains.update(float(g) for _, _, g in self.gain_windows)
        if self.alternating is not None:
            gains.add(float(self.alternating[1]))
        return sorted(gains)

    def eval(self, x, t, rng):
        """Draw ``h(x_t)`` as a length-1 input-space vector."""
        if t < 0:
            raise ValueError("time index must be nonnegative")
        basis = eval_basis(x, self.saturation_threshold)
        noise = truncated_normal(rng, self.noise_half_width)
        return np.array([self.gain(t) * float(self.basis_weights @ basis) + noise])


@dataclass(frozen=True)
class ZeroUncertainty:
    """Disturbance-free plant (h identically zero)."""

    input_dim: int = 1

    def eval(self, x, t, rng):
        return np.zeros(self.input_dim)


def step_nominal(model, x, u_m):
    """Nominal dynamics ``f(x) + g(x) u_m``; what the MPC predicts with."""
    return model.nominal(x, u_m)


def step_true(model, sets, uncertainty, x, u, t, rng):
    """Advance the true plant one step.

    Validates the applied input against the admissible set (a violation
    means the controller is buggy, not the plant), then returns the next
    state together with the realized uncertainty sample so callers can
    log ground truth for the diagnostics oracles.

    Returns:
        (x_next, h): next state and the drawn ``h(x_t)`` vector.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not sets.contains_input(u, tol=1e-9):
        raise InputBoundViolation(
            f"applied input {u} leaves the admissible set (u_max={sets.u_max})")
    h = uncertainty.eval(x, t, rng)
    x_next = model.f(x) + model.g(x) @ (u + h)
    return x_next, h


def pseudo_inverse(g_matrix):
    """Left pseudo-inverse ``(G^T G)^-1 G^T`` of a full-column-rank matrix."""
    g_matrix = np.atleast_2d(np.asarray(g_matrix, dtype=float))
    if g_matrix.ndim != 2:
        raise ValueError("expected a matrix")
    smin = np.linalg.svd(g_matrix, compute_uv=False).min()
    if smin <= RANK_TOL:
        raise SingularGainMatrix(
            f"matrix is numerically rank deficient (smallest singular value {smin:.2e})")
    gram = g_matrix.T @ g_matrix
    pinv = np.linalg.solve(gram, g_matrix.T)
    residual = np.linalg.norm(pinv @ g_matrix - np.eye(g_matrix.shape[1]))
    if residual > 1e-10:
        raise SingularGainMatrix(
            f"pseudo-inverse residual {residual:.2e} exceeds 1e-10")
    return pinv


def check_gain_rank(model, sets, n_samples=200, seed=0):
    """Numerically verify rank(g(x)) = m and ||g(x)|| <= delta_g on the state box.

    Returns the worst (smallest) singular value seen; raises if the rank
    or norm invariant fails at any sampled state.
    """
    rng = np.random.default_rng(seed)
    worst = np.inf
    for x in sets.sample_state(rng, size=n_samples):
        svals = np.linalg.svd(model.g(x), compute_uv=False)
        worst = min(worst, svals.min())
        if svals.min() <= RANK_TOL:
            raise SingularGainMatrix(f"g(x) rank deficient at x={x}")
        if svals.max() > model.delta_g * (1 + 1e-9):
            raise ConfigurationError(
                f"||g(x)|| = {svals.max():.6g} exceeds delta_g = {model.delta_g} at x={x}")
    return worst


def estimate_disturbance_bound(model, sets, spec, sample_count, safety=1.1, seed=0):
    """Estimate ``max ||g(x) h(x)||`` over the state box by random search.

    Samples states uniformly, takes the worst case over every schedule
    gain and noise extreme, and inflates by the safety factor.  Samples
    are drawn as a prefix-extendable stream, so the estimate is monotone
    nondecreasing in ``sample_count`` for a fixed seed.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    gains = np.array(spec.all_gains())
    noise_extremes = np.array([-spec.noise_half_width, 0.0, spec.noise_half_width])
    worst = 0.0
    for x in sets.sample_state(rng, size=sample_count):
        base = float(spec.basis_weights @ eval_basis(x, spec.saturation_threshold))
        h_candidates = gains[:, None] * base + noise_extremes[None, :]
        g_norm = np.linalg.norm(model.g(x), 2)
        worst = max(worst, g_norm * np.abs(h_candidates).max())
    return safety * worst


def wingrock_model():
    """The benchmark roll dynamics: A = [[1, 0.05], [0, 1]], B = [0, 0.05]."""
    return ControlAffineModel.linear(
        [[1.0, 0.05], [0.0, 1.0]], [0.0, 0.05])


def wingrock_sets(w_max=0.016):
    """Benchmark admissible sets; ``w_max`` defaults to the estimated bound."""
    return ConstraintSets(
        state_low=np.array([-np.pi / 6, -np.pi / 3]),
        state_high=np.array([np.pi / 6, np.pi / 3]),
        u_max=np.pi / 4,
        w_max=w_max,
    )


def wingrock_uncertainty():
    """Benchmark uncertainty: alternating 50-step gain windows plus noise."""
    omega_bar = 0.1523
    return UncertaintySpec(
        basis_weights=np.array([0.8, 0.2314, 0.6918, -0.6245, 0.0095, 0.0214]),
        alternating=(50, 4.0),
        noise_half_width=omega_bar,
        saturation_threshold=omega_bar / 5.0,
    )
