"""Synthetic data, label corruption with confidence scores, and dataset I/O."""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from csidn import nn, rng
from csidn.errors import ConfigError, DataError, ParseError, SchemaError, ValidationError

log = logging.getLogger(__name__)

CONFIDENCE_MODES = ("exact-posterior", "keep-probability")
NOISE_KINDS = ("clean", "ccn", "idn", "csidn")
TEST_STREAM_OFFSET = 1000


@dataclass
class Dataset:
    """Features with noisy labels, plus optional clean labels and confidences."""

    x: np.ndarray
    y_noisy: np.ndarray
    y_clean: np.ndarray = None
    r: np.ndarray = None
    n_classes: int = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.x.shape}")
        self.y_noisy = np.asarray(self.y_noisy, dtype=np.int64)
        n = self.x.shape[0]
        if self.y_clean is not None:
            self.y_clean = np.asarray(self.y_clean, dtype=np.int64)
        if self.r is not None:
            self.r = np.asarray(self.r, dtype=np.float64)
            if np.any((self.r < 0) | (self.r > 1)):
                raise DataError("confidence scores must lie in [0, 1]")
        for name in ("y_noisy", "y_clean", "r"):
            v = getattr(self, name)
            if v is not None and v.shape != (n,):
                raise DataError(f"{name} has shape {v.shape}, expected ({n},)")
        if self.n_classes is None:
            labels = [self.y_noisy] + ([self.y_clean] if self.y_clean is not None else [])
            self.n_classes = int(max((l.max() + 1 for l in labels if l.size), default=1))
        for v in (self.y_noisy, self.y_clean):
            if v is not None and v.size and (v.min() < 0 or v.max() >= self.n_classes):
                raise DataError(f"class index out of range [0, {self.n_classes})")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def take(self, idx):
        pick = lambda v: None if v is None else v[idx]
        return Dataset(self.x[idx], self.y_noisy[idx], pick(self.y_clean), pick(self.r), self.n_classes)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same = lambda a, b: (a is None and b is None) or (
            a is not None and b is not None and a.shape == b.shape and np.array_equal(a, b)
        )
        return (self.n_classes == other.n_classes and self.x.shape == other.x.shape
                and all(same(getattr(self, k), getattr(other, k)) for k in ("x", "y_noisy", "y_clean", "r")))


@dataclass(frozen=True)
class CirclesSpec:
    radii: tuple = (1.0, 2.0, 3.0)
    sigma_r: float = 0.15
    n_per_class: int = 1000
    seed: int = 0

    def __post_init__(self):
        radii = tuple(float(v) for v in self.radii)
        object.__setattr__(self, "radii", radii)
        if len(radii) < 2 or any(v <= 0 for v in radii):
            raise ValidationError("circles need at least two positive radii")
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValidationError("radii must be strictly increasing")
        if self.sigma_r < 0:
            raise ValidationError("sigma_r must be >= 0")
        if self.n_per_class <= 0:
            raise ValidationError("n_per_class must be > 0")

    @property
    def n_classes(self):
        return len(self.radii)


@dataclass(frozen=True)
class NoiseSpec:
    """How labels get corrupted.

    ``kind`` is one of ``clean``, ``ccn`` (fixed ``matrix``), ``idn``
    (directional flip probability, no confidences) or ``csidn`` (directional
    with confidence scores computed per ``confidence_mode``).
    """

    kind: str = "csidn"
    rho: float = 0.0
    w: tuple = (0.0, 1.0)
    matrix: tuple = None
    confidence_mode: str = "exact-posterior"
    flip_law: str = "uniform-other"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValidationError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValidationError(f"rho must be in [0, 1], got {self.rho}")
        w = np.asarray(self.w, dtype=np.float64)
        norm = np.linalg.norm(w)
        if norm == 0:
            raise ValidationError("direction w must be nonzero")
        object.__setattr__(self, "w", tuple((w / norm).tolist()))
        if self.kind == "ccn":
            if self.matrix is None:
                raise ValidationError("ccn noise needs a transition matrix")
            m = nn.check_stochastic(np.asarray(self.matrix, dtype=np.float64))
            object.__setattr__(self, "matrix", tuple(map(tuple, m.tolist())))
        if self.confidence_mode not in CONFIDENCE_MODES:
            raise ValidationError(f"unknown confidence mode {self.confidence_mode!r}")
        if self.flip_law != "uniform-other":
            raise ValidationError(f"unsupported flip law {self.flip_law!r}")


def gen_circles(spec, stream=rng.CIRCLES):
    """Concentric-circle classes: uniform angle, radius ~ Normal(radius_k, sigma_r)."""
    K, m = spec.n_classes, spec.n_per_class
    u = rng.point_uniforms(spec.seed, stream, 0, K * m)
    labels = np.repeat(np.arange(K), m)
    theta = 2.0 * np.pi * u[:, 0]
    # Box-Muller on the second and third draws
    z = np.sqrt(-2.0 * np.log1p(-u[:, 1])) * np.cos(2.0 * np.pi * u[:, 2])
    radius = np.asarray(spec.radii)[labels] + spec.sigma_r * z
    x = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    return Dataset(x, labels, labels.copy(), np.ones(K * m), K)


def gen_circles_test(spec):
    return gen_circles(spec, stream=rng.CIRCLES + TEST_STREAM_OFFSET)


def circles_posterior(x, spec):
    """Bayes posterior P(Y=k | x) of the circles mixture (equal class priors)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rad = np.linalg.norm(x, axis=1)[:, None]
    radii = np.asarray(spec.radii)[None, :]
    if spec.sigma_r == 0:
        post = np.zeros((x.shape[0], spec.n_classes))
        post[np.arange(x.shape[0]), np.argmin(np.abs(rad - radii), axis=1)] = 1.0
        return post
    s = spec.sigma_r
    # a negative radius draw lands at the antipode, hence the second term
    logdens = np.logaddexp(-0.5 * ((rad - radii) / s) ** 2, -0.5 * ((rad + radii) / s) ** 2)
    return nn.softmax(logdens)


def idn_flip_prob(x, w, rho):
    """rho * (cos(w, x) + 1) / 2, with the cosine at the origin taken as 0."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    xn = np.linalg.norm(x, axis=1)
    cos = np.divide(x @ w, xn * np.linalg.norm(w), out=np.zeros(x.shape[0]), where=xn > 0)
    p = rho * (np.clip(cos, -1.0, 1.0) + 1.0) / 2.0
    return float(p[0]) if single else p


def transition_law(x, spec, n_classes):
    """True per-instance transition matrices, shape ``(n, K, K)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, K = x.shape[0], n_classes
    if spec.kind == "clean":
        return np.broadcast_to(np.eye(K), (n, K, K)).copy()
    if spec.kind == "ccn":
        return np.broadcast_to(np.asarray(spec.matrix), (n, K, K)).copy()
    p = idn_flip_prob(x, spec.w, spec.rho)
    off = (p / (K - 1))[:, None, None] * (1.0 - np.eye(K))[None]
    return off + (1.0 - p)[:, None, None] * np.eye(K)[None]


def compute_confidence(x, y_noisy, spec, posterior=None, n_classes=None):
    """Confidence that the observed label is correct, P(Y=y_noisy | Y_noisy=y_noisy, x).

    ``exact-posterior`` needs the clean posterior ``posterior`` (n x K);
    ``keep-probability`` returns 1 - p(x).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y_noisy = np.atleast_1d(np.asarray(y_noisy, dtype=np.intp))
    if spec.kind not in ("idn", "csidn"):
        raise ValidationError(f"confidences are defined for directional noise, not {spec.kind!r}")
    p = idn_flip_prob(x, spec.w, spec.rho)
    if spec.confidence_mode == "keep-probability":
        return 1.0 - p
    if posterior is None:
        raise ValidationError("exact-posterior confidences need the clean posterior")
    posterior = np.atleast_2d(np.asarray(posterior, dtype=np.float64))
    K = n_classes or posterior.shape[1]
    T = transition_law(x, spec, K)
    rows = np.arange(x.shape[0])
    num = T[rows, y_noisy, y_noisy] * posterior[rows, y_noisy]
    den = np.einsum("ni,ni->n", T[rows, :, y_noisy], posterior)
    small = den < 1e-12
    if np.any(small):
        log.warning("%d confidence denominators below 1e-12; set to 0", int(small.sum()))
    return np.where(small, 0.0, num / np.where(small, 1.0, den))


def corrupt(data, spec, posterior=None):
    """Corrupt clean labels; features are passed through untouched.

    ``posterior`` is the clean posterior used for exact-posterior
    confidences (``n x K``); it is required only for that mode.
    """
    if data.y_clean is None:
        raise DataError("corruption needs clean labels")
    n, K = len(data), data.n_classes
    y = data.y_clean
    if spec.kind == "clean":
        return Dataset(data.x, y.copy(), y.copy(), np.ones(n), K)
    u = rng.point_uniforms(spec.seed, rng.CORRUPT, 0, n)
    if spec.kind == "ccn":
        cum = np.cumsum(np.asarray(spec.matrix), axis=1)[y]
        y_noisy = np.minimum((u[:, :1] >= cum).sum(axis=1), K - 1)
        return Dataset(data.x, y_noisy, y.copy(), None, K)
    p = idn_flip_prob(data.x, spec.w, spec.rho)
    flip = u[:, 0] < p
    # uniform over the K-1 other classes
    shift = 1 + np.minimum((u[:, 1] * (K - 1)).astype(np.int64), K - 2)
    y_noisy = np.where(flip, (y + shift) % K, y)
    r = None
    if spec.kind == "csidn":
        r = np.clip(compute_confidence(data.x, y_noisy, spec, posterior, K), 0.0, 1.0)
    return Dataset(data.x, y_noisy, y.copy(), r, K)


def corrupt_circles(data, circles, spec):
    """:func:`corrupt` with the analytic circles posterior supplied."""
    post = circles_posterior(data.x, circles) if spec.kind == "csidn" else None
    return corrupt(data, spec, post)


def perturb_confidence(r, sigma, seed):
    """Add zero-mean Gaussian noise of std ``sigma`` to each score, clip to [0, 1]."""
    r = np.asarray(r, dtype=np.float64)
    if sigma == 0:
        return r.copy()
    u = rng.point_uniforms(seed, rng.PERTURB, 0, r.shape[0])
    z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
    return np.clip(r + sigma * z, 0.0, 1.0)


def noise_rate(data):
    if data.y_clean is None:
        return None
    return float(np.mean(data.y_clean != data.y_noisy)) if len(data) else 0.0


# ---------------------------------------------------------------- pseudo-labels


@dataclass
class PipelineReport:
    temperature: float
    ece_uncalibrated: float
    ece_calibrated: float
    noise_rate: float = None
    info: dict = field(default_factory=dict)


def pseudo_label_pipeline(clean, valid, pool, hidden=(128, 128), epochs=100, batch_size=32,
                          lr=0.05, momentum=0.9, seed=0, temperature=None):
    """Label ``pool`` with a classifier fit on a small clean subset.

    The classifier is temperature-calibrated on ``valid`` (unless
    ``temperature`` is forced), then each pool point gets the calibrated
    argmax as its label and the calibrated max probability as its confidence.
    Returns ``(noisy pool, PipelineReport, model)``.
    """
    K = max(clean.n_classes, valid.n_classes, pool.n_classes)
    missing = sorted(set(range(K)) - set(np.unique(clean.y_noisy).tolist()))
    if missing:
        raise ConfigError(f"classes {missing} missing from the clean subset")
    if not (clean.dim == valid.dim == pool.dim):
        raise ConfigError("clean subset, validation set and pool differ in feature dimension")
    if len(valid) == 0:
        raise ConfigError("validation set is empty")
    model = nn.init_mlp([clean.dim, *hidden, K], seed)
    opt = nn.OptimizerState(lr, momentum)
    g = rng.generator(seed, rng.SHUFFLE)
    for _ in range(epochs):
        nn.train_epoch(model, clean.x, clean.y_noisy, nn.LossKind.ce(), opt, batch_size,
                       g.permutation(len(clean)))
    vlogits = model.logits(valid.x)
    t = nn.calibrate(vlogits, valid.y_noisy) if temperature is None else float(temperature)
    probs = nn.temperature_scale(model.logits(pool.x), t)
    y_clean = pool.y_clean if pool.y_clean is not None else None
    out = Dataset(pool.x, probs.argmax(axis=1), y_clean, probs.max(axis=1), K)
    report = PipelineReport(
        temperature=t,
        ece_uncalibrated=nn.expected_calibration_error(nn.softmax(vlogits), valid.y_noisy),
        ece_calibrated=nn.expected_calibration_error(nn.temperature_scale(vlogits, t), valid.y_noisy),
        noise_rate=noise_rate(out),
    )
    return out, report, model


def load_digits_dataset():
    """The 8x8 digits set from scikit-learn, scaled to [0, 1], as a clean Dataset."""
    from sklearn.datasets import load_digits

    d = load_digits()
    y = d.target.astype(np.int64)
    return Dataset(d.data / 16.0, y, y.copy(), None, 10)


def split(data, sizes, seed, balanced_first=False):
    """Disjoint random subsets with the given sizes (the rest is dropped).

    With ``balanced_first`` the first subset cycles through the classes of
    ``y_noisy`` so that every class present is represented in it.
    """
    if sum(sizes) > len(data):
        raise ConfigError(f"split sizes {sizes} exceed dataset size {len(data)}")
    order = rng.generator(seed, rng.SPLIT).permutation(len(data))
    if balanced_first and sizes:
        # rank each point within its class, then interleave classes by rank
        labels = data.y_noisy[order]
        rank = np.empty(len(order), dtype=np.int64)
        for k in np.unique(labels):
            members = np.flatnonzero(labels == k)
            rank[members] = np.arange(members.size)
        order = order[np.lexsort((labels, rank))]
    out, start = [], 0
    for s in sizes:
        out.append(data.take(np.sort(order[start:start + s])))
        start += s
    return out


# ------------------------------------------------------------------------ csv


def _fmt(v):
    return f"{v:.9g}"


def write_csv(data, path):
    d = data.dim
    header = [f"x{i}" for i in range(d)]
    if data.y_clean is not None:
        header.append("y_clean")
    header.append("y_noisy")
    if data.r is not None:
        header.append("r")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(data)):
            row = [_fmt(v) for v in data.x[i]]
            if data.y_clean is not None:
                row.append(str(int(data.y_clean[i])))
            row.append(str(int(data.y_noisy[i])))
            if data.r is not None:
                row.append(_fmt(data.r[i]))
            w.writerow(row)


def read_csv(path, require_confidence=False, n_classes=None):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", line=1) from None
        feats = [h for h in header if h.startswith("x")]
        if [f"x{i}" for i in range(len(feats))] != header[: len(feats)] or not feats:
            raise SchemaError(f"{path}: header must start with x0..x{{d-1}}, got {header}")
        rest = header[len(feats):]
        allowed = (["y_clean"] if "y_clean" in rest else []) + ["y_noisy"] + (["r"] if "r" in rest else [])
        if rest != allowed:
            raise SchemaError(f"{path}: unexpected label columns {rest}")
        if require_confidence and "r" not in rest:
            raise SchemaError(f"{path}: confidence column 'r' is required")
        d = len(feats)
        xs, yc, yn, rs = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                xs.append([float(v) for v in row[:d]])
                vals = dict(zip(rest, row[d:]))
                if "y_clean" in vals:
                    yc.append(int(vals["y_clean"]))
                yn.append(int(vals["y_noisy"]))
                if "r" in vals:
                    rs.append(float(vals["r"]))
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    x = np.asarray(xs, dtype=np.float64).reshape(-1, d)
    return Dataset(
        x,
        np.asarray(yn, dtype=np.int64),
        np.asarray(yc, dtype=np.int64) if "y_clean" in rest else None,
        np.asarray(rs, dtype=np.float64) if "r" in rest else None,
        n_classes,
    )


def dataset_from_circles(spec, noise=None):
    """Train split of the circles data, corrupted per ``noise`` when given."""
    data = gen_circles(spec)
    if noise is None:
        return data
    return corrupt_circles(data, spec, noise)


def with_confidence(data, r):
    return replace(data, r=np.asarray(r, dtype=np.float64))
