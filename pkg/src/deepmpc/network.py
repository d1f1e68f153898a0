"""Feature network, adaptive output layer, and the learning control law.

The network splits into a fixed hidden stack that produces a feature
vector phi(x) (leading entry pinned to 1) and an output weight matrix K
that is adapted online.  The adaptive input is ``u_a = -K^T phi(x)``;
K is updated from the one-step innovation and each column is radially
projected onto a ball so the adaptive authority stays bounded.
"""

import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError
from .plant import pseudo_inverse

# Activations available for hidden layers.  Only bounded ones are
# admissible for the last layer, since the feature norm bound
# sigma = sqrt(n_L + 1) requires a bounded final activation.
_ACTIVATIONS = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "sigmoid": lambda z: 1.0 / (1.0 + np.exp(-z)),
    "identity": lambda z: z,
}
_ACTIVATION_DERIVS = {
    "relu": lambda z: (z > 0).astype(float),
    "tanh": lambda z: 1.0 - np.tanh(z) ** 2,
    "sigmoid": lambda z: (s := 1.0 / (1.0 + np.exp(-z))) * (1.0 - s),
    "identity": lambda z: np.ones_like(z),
}
BOUNDED_ACTIVATIONS = ("tanh", "sigmoid")


def activation(name):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ConfigurationError(f"unknown activation '{name}'") from None


def activation_derivative(name):
    return _ACTIVATION_DERIVS[name]


@dataclass(frozen=True)
class FeatureNetwork:
    """Fixed hidden stack producing the feature vector phi.

    ``weights[i]`` has shape (n_i + 1, n_{i+1}): the first row is the bias
    acting on the constant 1 prepended to the layer input.  ``generation``
    counts completed background trainings; the stack is immutable and
    swapped wholesale between control steps.
    """

    weights: tuple
    activations: tuple
    generation: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.activations):
            raise ConfigurationError("one activation tag per weight matrix required")
        if not self.weights:
            raise ConfigurationError("at least one hidden layer is required")
        for name in self.activations:
            if name not in _ACTIVATIONS:
                raise ConfigurationError(f"unknown activation '{name}'")
        if self.activations[-1] not in BOUNDED_ACTIVATIONS:
            raise ConfigurationError(
                "last activation must be bounded (tanh or sigmoid) so the "
                "feature norm bound holds")
        object.__setattr__(self, "weights",
                           tuple(np.asarray(w, dtype=float) for w in self.weights))
        object.__setattr__(self, "activations", tuple(self.activations))

    @property
    def widths(self):
        """Layer widths [n_0, ..., n_L]."""
        return [self.weights[0].shape[0] - 1] + [w.shape[1] for w in self.weights]

    @property
    def feature_dim(self):
        """Length of phi: last layer width plus the pinned bias entry."""
        return self.weights[-1].shape[1] + 1

    @property
    def sigma_bound(self):
        """Analytic feature norm bound sqrt(n_L + 1) for a bounded last layer."""
        return float(np.sqrt(self.feature_dim))

    def with_weights(self, weights, bump_generation=False):
        gen = self.generation + 1 if bump_generation else self.generation
        return replace(self, weights=tuple(weights), generation=gen)


def init_feature_network(widths, activations, rng):
    """Random stack: entries uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].

    ``widths`` lists [n_0, ..., n_L]; each weight matrix includes its bias
    row, so fan_in for layer i is n_i + 1.
    """
    if len(widths) < 2:
        raise ConfigurationError("need at least input and output widths")
    if len(activations) != len(widths) - 1:
        raise ConfigurationError("need one activation per layer transition")
    weights = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(n_in + 1)
        weights.append(rng.uniform(-bound, bound, size=(n_in + 1, n_out)))
    return FeatureNetwork(weights=tuple(weights), activations=tuple(activations))


def forward_features(net, x):
    """Feature vector phi(x): bias entry 1 followed by the last activations."""
    z = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("state passed to the feature network is not finite")
    for w, act in zip(net.weights, net.activations):
        z = activation(act)(w.T @ np.concatenate(([1.0], z)))
    return np.concatenate(([1.0], z))


def forward_with_cache(net, x):
    """Forward pass retaining layer inputs and pre-activations for backprop.

    Accepts a single state (d,) or a batch (n, d); returns (phi, cache)
    where phi matches the input batch shape.
    """
    z = np.asarray(x, dtype=float)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    cache = []
    for w, act in zip(net.weights, net.activations):
        inp = np.concatenate([np.ones((z.shape[0], 1)), z], axis=1)
        pre = inp @ w
        cache.append((inp, pre))
        z = activation(act)(pre)
    phi = np.concatenate([np.ones((z.shape[0], 1)), z], axis=1)
    if single:
        return phi[0], cache
    return phi, cache


@dataclass(frozen=True)
class OutputWeights:
    """Adaptive output layer with per-column projection bounds.

    Attributes:
        k_matrix: (feature_dim, input_dim) weight matrix K.
        column_bounds: per-column radii; the projection keeps
            ``||K[:, i]|| <= column_bounds[i]`` after every update.
        learning_rate: adaptation gain theta, strictly inside (0, 1).
    """

    k_matrix: np.ndarray
    column_bounds: np.ndarray
    learning_rate: float

    def __post_init__(self):
        k = np.atleast_2d(np.asarray(self.k_matrix, dtype=float))
        bounds = np.atleast_1d(np.asarray(self.column_bounds, dtype=float))
        object.__setattr__(self, "k_matrix", k)
        object.__setattr__(self, "column_bounds", bounds)
        if bounds.shape != (k.shape[1],):
            raise ConfigurationError("one column bound per input dimension required")
        if np.any(bounds < 0):
            raise ConfigurationError("column bounds must be nonnegative")
        if not (0.0 < self.learning_rate < 1.0):
            raise ConfigurationError(
                f"learning rate must lie strictly in (0, 1), got {self.learning_rate}")
        norms = np.linalg.norm(k, axis=0)
        if np.any(norms > bounds + 1e-12):
            raise ConfigurationError("initial output weights violate the column bounds")

    @classmethod
    def zeros(cls, feature_dim, column_bounds, learning_rate):
        bounds = np.atleast_1d(np.asarray(column_bounds, dtype=float))
        return cls(np.zeros((feature_dim, bounds.size)), bounds, learning_rate)

    @property
    def frobenius_bound_sq(self):
        """Total weight budget: sum of squared column bounds."""
        return float(np.sum(self.column_bounds**2))


def adaptive_control(output_weights, phi):
    """Learning control component ``u_a = -K^T phi``."""
    return -(output_weights.k_matrix.T @ np.asarray(phi, dtype=float))


def project_columns(k_bar, bounds):
    """Radial projection of each column onto its bound ball; idempotent."""
    k_bar = np.atleast_2d(np.asarray(k_bar, dtype=float))
    bounds = np.atleast_1d(np.asarray(bounds, dtype=float))
    out = k_bar.copy()
    norms = np.linalg.norm(out, axis=0)
    for i, (norm, bound) in enumerate(zip(norms, bounds)):
        if norm > bound:
            out[:, i] *= bound / norm
    return out


def update_output_weights(output_weights, phi, x_next, x_nom_next, g_x):
    """One adaptation step from the observed one-step innovation.

    The innovation ``g(x)^+ (x_next - x_nom_next)`` recovers the apparent
    input-space disturbance ``u_a + h(x)``; the pre-projection update is
    ``K + (theta / ||phi||^2) phi innovation^T``, then every column is
    projected back onto its bound ball.
    """
    phi = np.asarray(phi, dtype=float)
    phi_sq = float(phi @ phi)
    if phi_sq < 1.0 - 1e-12:
        raise ValueError("feature vector lost its bias entry (||phi||^2 < 1)")
    innovation = pseudo_inverse(g_x) @ (np.asarray(x_next, float) - np.asarray(x_nom_next, float))
    k_bar = output_weights.k_matrix + (
        output_weights.learning_rate / phi_sq) * np.outer(phi, innovation)
    projected = project_columns(k_bar, output_weights.column_bounds)
    return replace(output_weights, k_matrix=projected)


def control_authority_bounds(column_bounds, sigma, delta_g, w_max, u_max=None):
    """Adaptive authority ``u_max_a`` and apparent disturbance bound.

    ``u_max_a = sqrt(sum bounds^2) * sigma`` bounds the adaptive input;
    the MPC then experiences disturbances up to
    ``w_prime = delta_g * u_max_a + w_max``.  When ``u_max`` is given,
    rejects configurations whose adaptive authority consumes the whole
    input set (the tightened input set would be empty).
    """
    if sigma <= 0 or delta_g <= 0 or w_max < 0:
        raise ConfigurationError("sigma and delta_g must be positive, w_max nonnegative")
    bounds = np.atleast_1d(np.asarray(column_bounds, dtype=float))
    u_max_a = float(np.sqrt(np.sum(bounds**2)) * sigma)
    w_prime = delta_g * u_max_a + w_max
    if u_max is not None and u_max_a >= u_max:
        raise ConfigurationError(
            f"empty tightened input set: adaptive authority {u_max_a:.6g} >= u_max {u_max:.6g}")
    return u_max_a, w_prime


@dataclass(frozen=True)
class IdealOracle:
    """Ground-truth uncertainty that is exactly linear in known features.

    Test machinery: ``h(x) = W*^T phi(x)`` with a frozen feature stack, so
    the reconstruction error is identically zero and the adaptation
    diagnostics have an exact reference.  Optional bounded noise breaks
    exactness on demand.
    """

    w_star: np.ndarray
    net: FeatureNetwork

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.w_star, dtype=float))
        if w.shape[0] != self.net.feature_dim:
            raise ConfigurationError(
                f"w_star rows ({w.shape[0]}) must match feature dim ({self.net.feature_dim})")
        object.__setattr__(self, "w_star", w)

    @property
    def input_dim(self):
        return self.w_star.shape[1]

    def eval(self, x, t, rng):
        return self.w_star.T @ forward_features(self.net, x)

    def reconstruction_error(self, x, phi):
        """eps_j(x) = h(x) - W*^T phi for the features actually used."""
        return self.eval(x, 0, None) - self.w_star.T @ np.asarray(phi, dtype=float)


# ---------------------------------------------------------------------------
# Serialization: plain text, layer sizes header followed by row-major
# matrices.  Shared by the trainer handoff and test fixtures.
# ---------------------------------------------------------------------------

def save_network(net, path_or_file):
    """Write a feature stack to the flat text format.

    Line 1: widths ``n_0 ... n_L``; line 2: activation tags; line 3: the
    generation index; then each weight matrix as one row per line,
    row-major, full float64 precision.
    """
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w") if own else path_or_file
    try:
        fh.write(" ".join(str(w) for w in net.widths) + "\n")
        fh.write(" ".join(net.activations) + "\n")
        fh.write(f"{net.generation}\n")
        for w in net.weights:
            for row in w:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    finally:
        if own:
            fh.close()


def load_network(path_or_file):
    """Read a feature stack written by :func:`save_network`."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file) if own else path_or_file
    try:
        widths = [int(v) for v in fh.readline().split()]
        activations = tuple(fh.readline().split())
        generation = int(fh.readline())
        weights = []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            rows = [
                np.array([float(v) for v in fh.readline().split()])
                for _ in range(n_in + 1)
            ]
            weights.append(np.vstack(rows).reshape(n_in + 1, n_out))
    finally:
        if own:
            fh.close()
    return FeatureNetwork(weights=tuple(weights), activations=activations,
                          generation=generation)


def network_to_text(net):
    buf = io.StringIO()
    save_network(net, buf)
    return buf.getvalue()


def network_from_text(text):
    return load_network(io.StringIO(text))
