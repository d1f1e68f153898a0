"""Self-supervised hidden-layer training on a replay buffer.

The control loop stores (state, adaptive input) pairs; once enough are
available, the hidden stack is retrained so that, with the output layer
frozen at the adaptation snapshot, the network reproduces the stored
adaptive inputs.  Training never touches the live stack: a candidate is
produced (synchronously or on a worker thread) and swapped in at a step
boundary.
"""

import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NotEnoughData, TrainingDiverged
from .network import activation, activation_derivative, forward_with_cache


@dataclass(frozen=True)
class TrainerConfig:
    """Replay-buffer and SGD hyperparameters plus the trigger schedule.

    ``first_trigger`` is the step of the first training and must be at
    least ``sample_size`` so a full dataset exists; afterwards trainings
    trigger every ``period`` steps.
    """

    sample_size: int            # pairs sampled per training (p_0)
    capacity: int               # replay buffer size (p_max)
    epochs: int = 50
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int | None = None   # defaults to min(32, sample_size)
    first_trigger: int | None = None
    period: int = 50
    synchronous: bool = True

    def __post_init__(self):
        if self.sample_size > self.capacity:
            raise ConfigurationError("sample_size must not exceed buffer capacity")
        if self.sample_size < 1 or self.capacity < 1:
            raise ConfigurationError("sample_size and capacity must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.period < 1:
            raise ConfigurationError("period must be positive")
        if self.first_trigger is not None and self.first_trigger < self.sample_size:
            raise ConfigurationError("first trigger must be >= sample_size")

    @property
    def effective_batch_size(self):
        return self.batch_size if self.batch_size is not None else min(32, self.sample_size)

    @property
    def effective_first_trigger(self):
        return self.first_trigger if self.first_trigger is not None else self.sample_size


@dataclass(frozen=True)
class PushDecision:
    """Outcome of a buffer insertion attempt."""

    kind: str                   # "appended" | "replaced" | "discarded"
    index: int | None = None


class ReplayBuffer:
    """Bounded store of (state, label) pairs with spectral experience selection.

    Once full, a new pair replaces the stored pair whose substitution
    maximizes the smallest singular value of the label Gram matrix
    ``T T^T`` -- and only if that strictly beats the current value;
    otherwise the new pair is discarded.  The selection strategy is
    swappable via ``selector``.
    """

    def __init__(self, capacity, selector=None):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be positive")
        self.capacity = capacity
        self._states = []
        self._labels = []
        self._selector = selector or max_min_singular_value_selector

    def __len__(self):
        return len(self._states)

    @property
    def full(self):
        return len(self) >= self.capacity

    def states(self):
        return np.array(self._states)

    def labels(self):
        """Stored labels as the (m, size) matrix T."""
        return np.array(self._labels).T

    def label_gram(self):
        t = self.labels()
        return t @ t.T

    def min_singular_value(self):
        """Smallest singular value of T T^T (zero for an empty buffer)."""
        if not self._labels:
            return 0.0
        return float(np.linalg.svd(self.label_gram(), compute_uv=False).min())

    def push_with_selection(self, x, label):
        x = np.asarray(x, dtype=float)
        label = np.atleast_1d(np.asarray(label, dtype=float))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(label))):
            raise ValueError("buffer entries must be finite")
        if not self.full:
            self._states.append(x)
            self._labels.append(label)
            return PushDecision("appended", len(self) - 1)
        index = self._selector(np.array(self._labels), label)
        if index is None:
            return PushDecision("discarded")
        self._states[index] = x
        self._labels[index] = label
        return PushDecision("replaced", index)

    def sample(self, sample_size, rng):
        """Sample ``sample_size`` pairs without replacement (seed-deterministic)."""
        if sample_size > len(self):
            raise NotEnoughData(
                f"requested {sample_size} pairs, buffer holds {len(self)}")
        idx = rng.choice(len(self), size=sample_size, replace=False)
        return self.states()[idx], np.array(self._labels)[idx]


def max_min_singular_value_selector(labels, new_label):
    """Pick the replacement slot maximizing the min singular value of T T^T.

    Returns the winning index, or ``None`` when no substitution strictly
    improves on the current smallest singular value.
    """
    # labels stacks pairs as rows (p, m); with T = labels.T the Gram
    # matrix T T^T equals labels.T @ labels, and swapping one label is a
    # rank-two update of it.
    gram = labels.T @ labels
    current = float(np.linalg.svd(gram, compute_uv=False).min())
    best_value, best_index = current, None
    for i in range(labels.shape[0]):
        candidate = gram - np.outer(labels[i], labels[i]) + np.outer(new_label, new_label)
        value = float(np.linalg.svd(candidate, compute_uv=False).min())
        if value > best_value + 1e-15:
            best_value, best_index = value, i
    return best_index


def _batch_residuals(xs, labels, net, k_frozen):
    """Residuals ``label + K^T phi(x)`` for every pair, plus the forward cache."""
    phi, cache = forward_with_cache(net, xs)
    return labels + phi @ k_frozen, cache, phi


def dataset_loss(xs, labels, net, k_frozen):
    """Mean squared residual of the frozen-output network on the dataset.

    The output layer is held at the negated adaptation snapshot, so a pair
    produced by the same stack incurs zero loss.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    labels = np.atleast_2d(np.asarray(labels, dtype=float))
    if xs.shape[0] == 0:
        raise ValueError("loss of an empty dataset is undefined")
    residuals, _, _ = _batch_residuals(xs, labels, net, k_frozen)
    return float(np.mean(np.sum(residuals**2, axis=1)))


def dataset_gradient(xs, labels, net, k_frozen):
    """Gradient of :func:`dataset_loss` w.r.t. every hidden weight matrix.

    Reverse-mode pass through the stack; the frozen output layer only
    routes the residual back (its own gradient is never formed).  ReLU
    uses subgradient 0 at the kink.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    labels = np.atleast_2d(np.asarray(labels, dtype=float))
    n = xs.shape[0]
    residuals, cache, _ = _batch_residuals(xs, labels, net, k_frozen)
    # d loss / d phi, dropping the constant bias entry of phi.
    grad_act = (2.0 / n) * residuals @ k_frozen.T[:, 1:]
    grads = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        inp, pre = cache[i]
        grad_pre = grad_act * activation_derivative(net.activations[i])(pre)
        grads[i] = inp.T @ grad_pre
        if i > 0:
            grad_act = grad_pre @ net.weights[i][1:, :].T
    return grads


@dataclass(frozen=True)
class TrainingResult:
    network: object
    initial_loss: float
    final_loss: float

    @property
    def improved(self):
        return self.final_loss <= self.initial_loss


def train(net, k_frozen, xs, labels, config, rng):
    """Minibatch SGD with momentum on the hidden stack.

    Returns a :class:`TrainingResult` whose network carries the next
    generation index; the caller installs it at a step boundary.  A
    non-finite loss raises :class:`TrainingDiverged` and the previous
    stack remains in service.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    labels = np.atleast_2d(np.asarray(labels, dtype=float))
    k_frozen = np.asarray(k_frozen, dtype=float)
    weights = [w.copy() for w in net.weights]
    velocity = [np.zeros_like(w) for w in weights]
    work = net.with_weights(weights)
    initial_loss = dataset_loss(xs, labels, work, k_frozen)
    batch = config.effective_batch_size
    for _ in range(config.epochs):
        order = rng.permutation(xs.shape[0])
        for start in range(0, xs.shape[0], batch):
            sel = order[start:start + batch]
            grads = dataset_gradient(xs[sel], labels[sel], work, k_frozen)
            for w, v, g in zip(weights, velocity, grads):
                v *= config.momentum
                v -= config.learning_rate * g
                w += v
            work = work.with_weights(weights)
        loss = dataset_loss(xs, labels, work, k_frozen)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"loss became non-finite after an epoch (was {initial_loss:.6g})")
    final_loss = dataset_loss(xs, labels, work, k_frozen)
    trained = net.with_weights([w.copy() for w in weights], bump_generation=True)
    return TrainingResult(trained, initial_loss, final_loss)


# ---------------------------------------------------------------------------
# Scheduling: when to collect, start a training, and swap weights in.
# ---------------------------------------------------------------------------

COLLECT = "collect"
START_TRAINING = "start_training"
SWAP_WEIGHTS = "swap_weights"


@dataclass
class TrainingScheduler:
    """Emits per-step actions for the collect/train/swap cycle.

    Every tick asks to collect the current pair.  At trigger instants
    (first at ``first_trigger``, then every ``period`` steps) and when no
    job is outstanding, a training starts; once the harness reports the
    job complete, the next tick asks for the swap.  Swaps therefore land
    between control steps, never inside one.
    """

    config: TrainerConfig
    next_trigger: int = field(init=False)
    busy: bool = field(default=False, init=False)
    ready: bool = field(default=False, init=False)
    pending_result: object = field(default=None, init=False)

    def __post_init__(self):
        self.next_trigger = self.config.effective_first_trigger

    def tick(self, t, buffer_size):
        actions = [COLLECT]
        if self.ready:
            actions.append(SWAP_WEIGHTS)
            self.ready = False
            self.busy = False
        if t >= self.next_trigger and not self.busy:
            if buffer_size >= self.config.sample_size:
                actions.append(START_TRAINING)
                self.busy = True
                self.next_trigger = t + self.config.period
            else:
                self.next_trigger = t + 1
        return actions

    def complete_training(self):
        """Harness callback: the outstanding job produced a candidate stack."""
        if self.busy:
            self.ready = True


class TrainerWorker:
    """Single-producer/single-consumer background trainer.

    ``submit`` hands over an immutable snapshot (stack copy, frozen
    output weights, dataset copies); ``poll`` returns a finished
    :class:`TrainingResult` or ``None``.  At most one job is in flight.
    """

    def __init__(self):
        self._jobs = queue.Queue(maxsize=1)
        self._results = queue.Queue(maxsize=1)
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        while True:
            job = self._jobs.get()
            if job is None:
                return
            net, k_frozen, xs, labels, config, seed = job
            try:
                result = train(net, k_frozen, xs, labels, config,
                               np.random.default_rng(seed))
            except TrainingDiverged as exc:
                result = exc
            self._results.put(result)

    def submit(self, net, k_frozen, xs, labels, config, seed):
        self._jobs.put((net, np.array(k_frozen, copy=True),
                        np.array(xs, copy=True), np.array(labels, copy=True),
                        config, seed))

    def poll(self):
        try:
            return self._results.get_nowait()
        except queue.Empty:
            return None

    def wait(self, timeout=None):
        return self._results.get(timeout=timeout)

    def shutdown(self):
        self._jobs.put(None)
        self._thread.join(timeout=5.0)
