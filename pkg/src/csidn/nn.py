"""Small dense softmax classifier with hand-written backpropagation.

Provides the losses used for noisy-label training (cross-entropy, MAE,
generalized cross-entropy ``L_q`` and forward-corrected cross-entropy),
momentum SGD, temperature scaling with ECE-based calibration, JSON
checkpoints and a central finite-difference gradient checker.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from csidn import kernels, rng
from csidn.errors import (
    ConfigError,
    DomainError,
    NumericError,
    SchemaError,
    ShapeError,
    ValidationError,
)

PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = "csidn-mlp"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LossKind:
    name: str
    q: float = 0.7

    NAMES = ("ce", "mae", "lq", "forward")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ValidationError(f"unknown loss {self.name!r}; expected one of {self.NAMES}")
        if self.name == "lq" and not 0.0 < self.q <= 1.0:
            raise ValidationError(f"lq requires q in (0, 1], got {self.q}")

    @classmethod
    def ce(cls):
        return cls("ce")

    @classmethod
    def mae(cls):
        return cls("mae")

    @classmethod
    def lq(cls, q=0.7):
        return cls("lq", q)

    @classmethod
    def forward(cls):
        return cls("forward")


@dataclass
class Layer:
    weights: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weights {self.weights.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")


class MLPModel:
    """Feed-forward network whose last layer feeds a softmax."""

    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if prev.weights.shape[1] != cur.weights.shape[0]:
                raise ShapeError(
                    f"layer {i} expects input dim {cur.weights.shape[0]}, "
                    f"layer {i - 1} outputs {prev.weights.shape[1]}"
                )

    @property
    def input_dim(self):
        return self.layers[0].weights.shape[0]

    @property
    def n_classes(self):
        return self.layers[-1].weights.shape[1]

    def params(self):
        """Flat list of parameter arrays, ``[W0, b0, W1, b1, ...]``."""
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def copy(self):
        return MLPModel([Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def _run(self, x, keep):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        cache = []
        a = x
        for i, layer in enumerate(self.layers):
            if a.shape[1] != layer.weights.shape[0]:
                raise ShapeError(
                    f"layer {i} expects input dim {layer.weights.shape[0]}, got {a.shape[1]}"
                )
            z = a @ layer.weights + layer.bias
            if keep:
                cache.append((a, z))
            a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        return a, cache

    def logits(self, x):
        return self._run(x, keep=False)[0]

    def forward(self, x):
        return softmax(self.logits(x))

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)

    def gradients(self, x, dlogits_fn):
        """Backpropagate. ``dlogits_fn(probs)`` returns ``(losses, dL/dlogits)``."""
        logits, cache = self._run(x, keep=True)
        probs = softmax(logits)
        losses, dz = dlogits_fn(probs)
        grads = []
        for layer, (a_in, z) in zip(reversed(self.layers), reversed(cache)):
            if layer.activation == "relu":
                dz = dz * (z > 0)
            grads.append((a_in.T @ dz, dz.sum(axis=0)))
            dz = dz @ layer.weights.T
        grads.reverse()
        flat = []
        for gw, gb in grads:
            flat += [gw, gb]
        return losses, flat


def init_mlp(sizes, seed, hidden_activation="relu", tag=0):
    """Layers sized ``sizes[0] -> ... -> sizes[-1]``, uniform(+-1/sqrt(fan_in)) init.

    ``tag`` selects an independent initialization for the same seed.
    """
    if len(sizes) < 2:
        raise ShapeError("sizes needs an input and an output width")
    g = rng.generator(seed, rng.INIT, tag)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        act = "identity" if i == len(sizes) - 2 else hidden_activation
        layers.append(Layer(g.uniform(-bound, bound, (fan_in, fan_out)),
                            g.uniform(-bound, bound, fan_out), act))
    return MLPModel(layers)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, K):
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DomainError(f"label out of range [0, {K})")
    return labels


def check_stochastic(T, atol=1e-6):
    T = np.asarray(T, dtype=np.float64)
    if T.shape[-1] != T.shape[-2]:
        raise ValidationError(f"transition matrix must be square, got {T.shape[-2:]}")
    if np.any(T < -atol) or np.any(T > 1 + atol) or np.any(np.abs(T.sum(axis=-1) - 1.0) > atol):
        raise ValidationError("transition matrix is not row-stochastic")
    return T


def _dprobs_to_dlogits(probs, dprobs):
    return probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))


def loss_grad(kind, probs, labels, T=None):
    """Per-sample losses and their gradients with respect to the logits.

    ``T`` is required for the forward-corrected loss and may be a single
    ``K x K`` matrix, a stack of per-sample matrices, or
    :class:`~csidn.kernels.FactoredTransitions`.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n, K = probs.shape
    labels = _check_labels(labels, K)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} samples")
    if kind.name == "forward":
        if T is None:
            raise ValidationError("forward-corrected loss needs a transition matrix")
        if isinstance(T, kernels.FactoredTransitions):
            return kernels.ilfc_loss_grad(probs, labels, T)
        T = check_stochastic(T)
        if T.ndim == 2:
            T = np.broadcast_to(T, (n, K, K))
        if T.shape != (n, K, K):
            raise ShapeError(f"per-instance T has shape {T.shape}, expected {(n, K, K)}")
        return kernels.corrected_loss_grad(probs, labels, T, PROB_FLOOR)
    if T is not None:
        raise ValidationError(f"{kind.name} loss takes no transition matrix")

    rows = np.arange(n)
    py = probs[rows, labels]
    dprobs = np.zeros_like(probs)
    if kind.name == "ce":
        live = py >= PROB_FLOOR
        losses = -np.log(np.maximum(py, PROB_FLOOR))
        dprobs[rows, labels] = np.where(live, -1.0 / np.maximum(py, PROB_FLOOR), 0.0)
    elif kind.name == "mae":
        # |e_y - p|_1 = 2 (1 - p_y) on the simplex
        losses = 2.0 * (1.0 - py)
        dprobs[rows, labels] = -2.0
    else:
        q = kind.q
        pc = np.maximum(py, PROB_FLOOR)
        losses = (1.0 - pc**q) / q
        dprobs[rows, labels] = np.where(py >= PROB_FLOOR, -(pc ** (q - 1.0)), 0.0)
    return losses, _dprobs_to_dlogits(probs, dprobs)


def loss(kind, probs, label, T=None):
    """Loss of one probability vector at one label."""
    probs = np.asarray(probs, dtype=np.float64)
    if T is not None and not isinstance(T, kernels.FactoredTransitions):
        T = np.asarray(T, dtype=np.float64)
        if T.ndim == 2:
            T = T[None]
    return float(loss_grad(kind, probs[None, :], [label], T)[0][0])


@dataclass
class OptimizerState:
    lr: float = 0.05
    momentum: float = 0.9
    velocity: list = field(default_factory=list)
    epoch: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValidationError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")

    def ensure(self, model):
        shapes = [p.shape for p in model.params()]
        if [v.shape for v in self.velocity] != shapes:
            self.velocity = [np.zeros(s) for s in shapes]


def _param_name(k):
    return f"layer {k // 2} {'weights' if k % 2 == 0 else 'bias'}"


def backward_and_step(model, batch, labels, kind, T=None, opt=None):
    """One momentum-SGD step on the mean batch loss; returns ``(model, pre-update loss)``."""
    opt = opt if opt is not None else OptimizerState()
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    if batch.shape[0] != labels.shape[0]:
        raise ShapeError(f"{batch.shape[0]} samples but {labels.shape[0]} labels")
    n = batch.shape[0]
    losses, grads = model.gradients(batch, lambda p: loss_grad(kind, p, labels, T))
    opt.ensure(model)
    for k, (param, g, v) in enumerate(zip(model.params(), grads, opt.velocity)):
        g = g / n
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {_param_name(k)}")
        v *= opt.momentum
        v += g
        param -= opt.lr * v
    return model, float(np.mean(losses))


def mean_loss(model, batch, labels, kind, T=None):
    return float(np.mean(loss_grad(kind, model.forward(batch), labels, T)[0]))


def temperature_scale(logits, t):
    if not t > 0:
        raise ValidationError(f"temperature must be > 0, got {t}")
    return softmax(np.asarray(logits, dtype=np.float64) / t)


def expected_calibration_error(probs, labels, n_bins=15):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise ValidationError("empty set has no calibration error")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    counts, conf_sum, acc_sum = kernels.ece_bins(conf, correct, n_bins)
    return float(np.sum(np.abs(acc_sum - conf_sum)) / probs.shape[0])


def temperature_grid(n=50, lo=0.25, hi=8.0):
    return np.unique(np.append(np.geomspace(lo, hi, n), 1.0))


def calibrate(logits, labels, grid=None, n_bins=15):
    """Temperature minimizing ECE on a labelled validation set."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] == 0:
        raise ConfigError("validation set is empty")
    grid = temperature_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    eces = [expected_calibration_error(temperature_scale(logits, t), labels, n_bins) for t in grid]
    return float(grid[int(np.argmin(eces))])


def save_model(model, path):
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layers": [
            {
                "in": int(l.weights.shape[0]),
                "out": int(l.weights.shape[1]),
                "activation": l.activation,
                "weights": l.weights.ravel().tolist(),
                "bias": l.bias.tolist(),
            }
            for l in model.layers
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path}: not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(
            f"{path}: checkpoint version {blob.get('version')} != {CHECKPOINT_VERSION}"
        )
    layers = []
    for spec in blob["layers"]:
        w = np.asarray(spec["weights"], dtype=np.float64).reshape(spec["in"], spec["out"])
        layers.append(Layer(w, np.asarray(spec["bias"], dtype=np.float64), spec["activation"]))
    return MLPModel(layers)


def gradient_check(model, batch, labels, kind, T=None, eps=1e-5, per_layer=5, seed=0):
    """Largest relative error between analytic and central-difference gradients.

    Checks ``per_layer`` random entries of every weight matrix and bias.
    """
    batch = np.asarray(batch, dtype=np.float64)
    _, grads = model.gradients(batch, lambda p: loss_grad(kind, p, labels, T))
    n = batch.shape[0]
    g = np.random.default_rng(seed)
    worst = 0.0
    for param, grad in zip(model.params(), grads):
        flat, gflat = param.reshape(-1), grad.reshape(-1) / n
        for k in g.choice(flat.size, size=min(per_layer, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + eps
            up = mean_loss(model, batch, labels, kind, T)
            flat[k] = old - eps
            down = mean_loss(model, batch, labels, kind, T)
            flat[k] = old
            numeric = (up - down) / (2 * eps)
            scale = max(abs(numeric), abs(gflat[k]), 1e-8)
            worst = max(worst, abs(numeric - gflat[k]) / scale)
    return worst


def train_epoch(model, x, labels, kind, opt, batch_size, order, T=None):
    """Run minibatches over ``order``; returns mean of the per-batch losses.

    ``T`` may be a ``K x K`` matrix, a per-sample stack aligned with ``x`` or
    :class:`~csidn.kernels.FactoredTransitions` aligned with ``x``.
    """
    losses = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        Tb = T
        if isinstance(T, kernels.FactoredTransitions):
            Tb = T.take(idx)
        elif T is not None and np.ndim(T) == 3:
            Tb = T[idx]
        _, value = backward_and_step(model, x[idx], labels[idx], kind, Tb, opt)
        losses.append(value)
    opt.epoch += 1
    return float(np.mean(losses)) if losses else 0.0
