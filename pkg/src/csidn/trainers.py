"""Training loops: naive, ILFC, forward correction, robust losses, co-teaching."""

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from csidn import kernels, nn, noise_est, rng
from csidn.errors import ConfigError, SchemaError

log = logging.getLogger(__name__)

METHODS = ("naive", "ilfc", "fc", "mae", "lq", "coteaching")
LR_SCHEDULES = ("constant", "cosine")

# shuffle-stream tags so that h_noisy and the main model see independent orders
_TAG_MAIN, _TAG_NOISY, _TAG_PEER = 0, 1, 2


@dataclass
class TrainConfig:
    method: str = "naive"
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    hidden: tuple = (32, 32)
    q: float = 0.7
    forget_rate: float = None  # None: measured noise rate of the training labels
    ramp_epochs: int = 10
    anchors: int = 20
    noisy_lr_schedule: str = "cosine"  # h_noisy is a posterior estimate, so anneal it
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}", "train.method")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "train.epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "train.batch_size")
        if not self.lr > 0:
            raise ConfigError("must be > 0", "train.lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("must be in [0, 1)", "train.momentum")
        if not 0.0 < self.q <= 1.0:
            raise ConfigError("must be in (0, 1]", "train.q")
        if self.forget_rate is not None and not 0.0 <= self.forget_rate <= 1.0:
            raise ConfigError("must be in [0, 1]", "train.forget_rate")
        if self.ramp_epochs < 1:
            raise ConfigError("must be >= 1", "train.ramp_epochs")
        if self.anchors < 1:
            raise ConfigError("must be >= 1", "train.anchors")
        if self.noisy_lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"must be one of {LR_SCHEDULES}", "train.noisy_lr_schedule")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


RUN_SCHEMA_VERSION = 1


@dataclass
class RunResult:
    method: str
    config: dict
    config_hash: str
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    wall_time: float = 0.0
    model_ref: str = None
    extra: dict = field(default_factory=dict)
    model: object = field(default=None, repr=False, compare=False)
    peer: object = field(default=None, repr=False, compare=False)

    def verify(self):
        """True when the embedded hash matches the embedded config."""
        return config_hash(self.config) == self.config_hash

    def to_dict(self):
        return {
            "schema_version": RUN_SCHEMA_VERSION,
            "method": self.method,
            "config": self.config,
            "config_hash": self.config_hash,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "wall_time": self.wall_time,
            "model_ref": self.model_ref,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != RUN_SCHEMA_VERSION:
            raise SchemaError(f"run schema version {d.get('schema_version')} != {RUN_SCHEMA_VERSION}")
        return cls(
            method=d["method"], config=d["config"], config_hash=d["config_hash"],
            train_loss=d["train_loss"], train_acc=d["train_acc"], test_acc=d["test_acc"],
            wall_time=d["wall_time"], model_ref=d.get("model_ref"), extra=d.get("extra", {}),
        )


class _Run:
    """Shared bookkeeping for one training run."""

    def __init__(self, data, cfg, test, context):
        self.data, self.cfg, self.test = data, cfg, test
        full = {"train": cfg.to_dict(), **(context or {})}
        self.result = RunResult(cfg.method, full, config_hash(full))
        self.t0 = time.perf_counter()

    def new_model(self, tag=_TAG_MAIN):
        d = self.data
        return nn.init_mlp([d.dim, *self.cfg.hidden, d.n_classes], self.cfg.seed, tag=tag)

    def new_opt(self):
        return nn.OptimizerState(self.cfg.lr, self.cfg.momentum)

    def order(self, epoch, tag=_TAG_MAIN):
        return rng.generator(self.cfg.seed, rng.SHUFFLE, tag, epoch).permutation(len(self.data))

    def record(self, model, train_loss):
        r = self.result
        r.train_loss.append(float(train_loss))
        r.train_acc.append(accuracy(model, self.data.x, self.data.y_noisy))
        if self.test is not None:
            truth = self.test.y_clean if self.test.y_clean is not None else self.test.y_noisy
            r.test_acc.append(accuracy(model, self.test.x, truth))

    def finish(self, model):
        self.result.wall_time = time.perf_counter() - self.t0
        self.result.model = model
        return self.result


def accuracy(model, x, y):
    if len(y) == 0:
        return float("nan")
    return float(np.mean(model.predict(x) == np.asarray(y)))


def lr_at(base, epoch, epochs, schedule="constant"):
    """Learning rate for a 0-based epoch; ``cosine`` anneals from ``base`` toward 0."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
    raise ConfigError(f"unknown schedule {schedule!r}", "train.noisy_lr_schedule")


def _plain(data, cfg, kind, test, context, tag=_TAG_MAIN, schedule="constant"):
    run = _Run(data, cfg, test, context)
    model, opt = run.new_model(tag), run.new_opt()
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(cfg.lr, epoch, cfg.epochs, schedule)
        value = nn.train_epoch(model, data.x, data.y_noisy, kind, opt, cfg.batch_size, run.order(epoch, tag))
        run.record(model, value)
    return run.finish(model)


def train_naive(data, cfg, test=None, context=None):
    """Cross-entropy on the observed labels; returns a RunResult whose ``model`` is h_noisy."""
    return _plain(data, cfg, nn.LossKind.ce(), test, context)


def train_baseline_loss(data, cfg, test=None, context=None):
    """Training with the MAE or L_q loss, no noise modelling."""
    if cfg.method == "mae":
        kind = nn.LossKind.mae()
    elif cfg.method == "lq":
        kind = nn.LossKind.lq(cfg.q)
    else:
        raise ConfigError(f"robust-loss trainer needs mae or lq, got {cfg.method!r}", "train.method")
    return _plain(data, cfg, kind, test, context)


def train_noisy_posterior(data, cfg):
    """Fit h_noisy, the estimate of P(noisy label | x), with the run's epoch budget."""
    naive = TrainConfig(**{**cfg.to_dict(), "method": "naive"})
    return _plain(data, naive, nn.LossKind.ce(), None, None, tag=_TAG_NOISY,
                  schedule=cfg.noisy_lr_schedule).model


def _noisy_classifier(data, cfg, h_noisy):
    return h_noisy if h_noisy is not None else train_noisy_posterior(data, cfg)


def train_ilfc(data, cfg, test=None, anchors=None, context=None, h_noisy=None, diagnostics=None):
    """Instance-level forward correction.

    Trains h_noisy (unless given), estimates alpha once from anchors, then per
    epoch: recompute mu, train one epoch with the per-sample T(x)-corrected
    loss, and refresh beta from ``h_noisy / h``.
    """
    if data.r is None:
        raise SchemaError("ILFC needs a confidence score for every sample")
    run = _Run(data, cfg, test, context)
    h_noisy = _noisy_classifier(data, cfg, h_noisy)
    noisy_probs = h_noisy.forward(data.x)
    labels, r, K = data.y_noisy, data.r, data.n_classes
    anchor_set = noise_est.select_anchors(noisy_probs, cfg.anchors, labels, provided=anchors)
    alpha_est = noise_est.estimate_alpha(anchor_set, noisy_probs, r)
    diag = diagnostics if diagnostics is not None else noise_est.Diagnostics()
    diag.record_alpha(alpha_est)
    beta = noise_est.init_beta(len(data))
    model, opt = run.new_model(), run.new_opt()
    kind = nn.LossKind.forward()
    for epoch in range(cfg.epochs):
        mu = noise_est.mean_diag(r, beta, labels, K)
        diag.record_epoch(mu, beta)
        factors = kernels.FactoredTransitions(r, beta, mu, alpha_est.alpha, noise_est.DIAG_CLIP[0])
        value = nn.train_epoch(model, data.x, labels, kind, opt, cfg.batch_size, run.order(epoch), factors)
        beta = noise_est.update_beta(beta, noisy_probs, model.forward(data.x), labels)
        run.record(model, value)
    run.result.extra["alpha"] = alpha_est.alpha.tolist()
    run.result.extra["mu_final"] = noise_est.mean_diag(r, beta, labels, K).tolist()
    return run.finish(model)


def train_fc(data, cfg, test=None, anchors=None, context=None, h_noisy=None):
    """Forward correction with one transition matrix estimated before training."""
    run = _Run(data, cfg, test, context)
    h_noisy = _noisy_classifier(data, cfg, h_noisy)
    noisy_probs = h_noisy.forward(data.x)
    anchor_set = noise_est.select_anchors(noisy_probs, cfg.anchors, provided=anchors)
    T = noise_est.estimate_fixed_T(anchor_set, noisy_probs)
    model, opt = run.new_model(), run.new_opt()
    for epoch in range(cfg.epochs):
        value = nn.train_epoch(model, data.x, data.y_noisy, nn.LossKind.forward(), opt,
                               cfg.batch_size, run.order(epoch), T)
        run.record(model, value)
    run.result.extra["T"] = T.tolist()
    return run.finish(model)


def keep_rate(epoch, forget_rate, ramp_epochs):
    """Fraction of small-loss samples kept at a (0-based) epoch."""
    if not 0.0 <= forget_rate <= 1.0:
        raise ConfigError(f"forget rate must be in [0, 1], got {forget_rate}", "train.forget_rate")
    return 1.0 - min(epoch / ramp_epochs, 1.0) * forget_rate


def n_keep(rate, n):
    return min(n, math.ceil(rate * n - 1e-9))


def _forget_rate(data, cfg):
    if cfg.forget_rate is not None:
        return cfg.forget_rate
    if data.y_clean is not None:
        return float(np.mean(data.y_clean != data.y_noisy))
    if data.r is not None:
        return float(1.0 - np.mean(data.r))
    raise ConfigError("no forget rate configured and none measurable", "train.forget_rate")


def train_coteaching(data, cfg, test=None, context=None):
    """Two peers; each feeds its smallest-loss fraction of every batch to the other."""
    tau = _forget_rate(data, cfg)
    keep_rate(0, tau, cfg.ramp_epochs)
    run = _Run(data, cfg, test, context)
    f, g = run.new_model(_TAG_MAIN), run.new_model(_TAG_PEER)
    opt_f, opt_g = run.new_opt(), run.new_opt()
    ce = nn.LossKind.ce()
    x, y = data.x, data.y_noisy
    fractions = []
    for epoch in range(cfg.epochs):
        rate = keep_rate(epoch, tau, cfg.ramp_epochs)
        order = run.order(epoch)
        losses, kept = [], 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            k = n_keep(rate, idx.size)
            lf = nn.loss_grad(ce, f.forward(x[idx]), y[idx])[0]
            lg = nn.loss_grad(ce, g.forward(x[idx]), y[idx])[0]
            pick_f = idx[np.argsort(lf, kind="stable")[:k]]
            pick_g = idx[np.argsort(lg, kind="stable")[:k]]
            _, value = nn.backward_and_step(f, x[pick_g], y[pick_g], ce, None, opt_f)
            nn.backward_and_step(g, x[pick_f], y[pick_f], ce, None, opt_g)
            losses.append(value)
            kept += k
        fractions.append(kept / len(order))
        run.record(f, float(np.mean(losses)))
    run.result.extra.update({"forget_rate": tau, "selected_fraction": fractions})
    run.result.peer = g
    return run.finish(f)


def train_small_loss(data, cfg, forget_rate=0.5, test=None, context=None):
    """Single network trained on the epoch-level smallest-loss fraction.

    Losses come from the model as it stands at the start of each epoch.
    Per-epoch keep rates are recorded in ``extra["keep_rate"]``.
    """
    run = _Run(data, cfg, test, context)
    model, opt = run.new_model(), run.new_opt()
    ce = nn.LossKind.ce()
    x, y = data.x, data.y_noisy
    rates = []
    for epoch in range(cfg.epochs):
        rate = keep_rate(epoch, forget_rate, cfg.ramp_epochs)
        per_sample = nn.loss_grad(ce, model.forward(x), y)[0]
        selected = np.sort(np.argsort(per_sample, kind="stable")[: n_keep(rate, len(data))])
        order = selected[rng.generator(cfg.seed, rng.SHUFFLE, _TAG_MAIN, epoch).permutation(selected.size)]
        value = nn.train_epoch(model, x, y, ce, opt, cfg.batch_size, order)
        rates.append(rate)
        run.record(model, value)
    run.result.extra.update({"keep_rate": rates})
    return run.finish(model)


def small_loss_set(model, data, fraction):
    """Indices of the ``ceil(fraction * n)`` smallest cross-entropy losses."""
    per_sample = nn.loss_grad(nn.LossKind.ce(), model.forward(data.x), data.y_noisy)[0]
    k = n_keep(fraction, len(data))
    return np.sort(np.argsort(per_sample, kind="stable")[:k])


def train(data, cfg, test=None, context=None, anchors=None):
    """Dispatch on ``cfg.method``."""
    m = cfg.method
    if m == "naive":
        return train_naive(data, cfg, test, context)
    if m == "ilfc":
        return train_ilfc(data, cfg, test, anchors, context)
    if m == "fc":
        return train_fc(data, cfg, test, anchors, context)
    if m in ("mae", "lq"):
        return train_baseline_loss(data, cfg, test, context)
    return train_coteaching(data, cfg, test, context)
