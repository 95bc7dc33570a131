"""Estimation of instance-dependent transition matrices from confidence scores.

Per-sample quantities are stored as flat arrays aligned with the dataset:
``beta[s]`` is the density ratio for the observed class of sample ``s``.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from csidn.errors import ValidationError

log = logging.getLogger(__name__)

BETA_CLIP = (0.05, 20.0)
DIAG_CLIP = (1e-3, 1.0)
H_FLOOR = 1e-6
ALPHA_DENOM_MIN = 1e-3


def init_beta(n):
    return np.ones(n)


def update_beta(beta, h_noisy, h, labels, members=None, cls=None):
    """Replace entries with ``h_noisy(x)_y / h(x)_y`` for ``y`` the observed label.

    ``members`` restricts the update to a subset of samples; with ``cls``
    given, every member must carry that observed label.
    """
    beta = np.array(beta, dtype=np.float64, copy=True)
    labels = np.asarray(labels, dtype=np.intp)
    members = np.arange(labels.shape[0]) if members is None else np.asarray(members, dtype=np.intp)
    if cls is not None and np.any(labels[members] != cls):
        bad = members[labels[members] != cls][0]
        raise IndexError(f"sample {bad} has observed label {labels[bad]}, not {cls}")
    y = labels[members]
    hn = np.asarray(h_noisy, dtype=np.float64)[members, y]
    hc = np.maximum(np.asarray(h, dtype=np.float64)[members, y], H_FLOOR)
    beta[members] = np.clip(hn / hc, *BETA_CLIP)
    return beta


def diag_confident(r, beta):
    """Diagonal entry for the observed class: ``r * beta`` clipped to [1e-3, 1]."""
    out = np.clip(np.asarray(r, dtype=np.float64) * np.asarray(beta, dtype=np.float64), *DIAG_CLIP)
    return float(out) if out.ndim == 0 else out


def mean_diag(r, beta, labels, n_classes, global_rate=None):
    """Per-class mean of the confident diagonal estimates over samples observed in that class.

    A class with no samples falls back to ``1 - (K-1)/K * global_rate``, where
    the global rate defaults to ``1 - mean(r)``.
    """
    labels = np.asarray(labels, dtype=np.intp)
    d = np.atleast_1d(diag_confident(r, beta))
    K = n_classes
    counts = np.bincount(labels, minlength=K)
    sums = np.bincount(labels, weights=d, minlength=K)
    mu = np.empty(K)
    for i in range(K):
        if counts[i] > 0:
            mu[i] = sums[i] / counts[i]
        else:
            rate = global_rate if global_rate is not None else (1.0 - float(np.mean(r)) if len(d) else 0.0)
            mu[i] = 1.0 - (K - 1) / K * rate
            log.warning("class %d has no samples; mu falls back to %.4f", i, mu[i])
    return np.clip(mu, *DIAG_CLIP)


def select_anchors(h_noisy, m, labels=None, provided=None):
    """Per class, the ``m`` samples with the highest ``h_noisy(x)_i``.

    When ``labels`` is given, candidates for class ``i`` are restricted to
    samples observed as ``i`` (their confidence then refers to class ``i``);
    if fewer than ``m`` exist, all samples are ranked instead. ``provided``
    anchors are returned unchanged.
    """
    if provided is not None:
        return {int(k): np.asarray(v, dtype=np.intp) for k, v in provided.items()}
    if m < 1:
        raise ValidationError("anchor count m must be >= 1")
    h_noisy = np.asarray(h_noisy, dtype=np.float64)
    n, K = h_noisy.shape
    anchors = {}
    for i in range(K):
        pool = np.arange(n)
        if labels is not None:
            own = np.flatnonzero(np.asarray(labels) == i)
            if own.size >= m:
                pool = own
        if pool.size < m:
            log.warning("class %d: only %d candidates for %d anchors", i, pool.size, m)
        # stable sort keeps ties in index order
        order = np.argsort(-h_noisy[pool, i], kind="stable")
        anchors[i] = np.sort(pool[order[:m]])
    return anchors


@dataclass
class AlphaEstimate:
    alpha: np.ndarray
    raw: np.ndarray
    degenerate: list = field(default_factory=list)


def estimate_alpha(anchors, h_noisy, r):
    """Class transitions given an error, from anchor points.

    ``alpha[i, j] = mean(h_noisy_j) / (1 - mean(r * h_noisy_i))`` over the
    anchors of class ``i``; entries are clipped to [0, 1] and each row's
    off-diagonal is rescaled to sum to 1.
    """
    h_noisy = np.asarray(h_noisy, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    K = h_noisy.shape[1]
    raw = np.zeros((K, K))
    alpha = np.zeros((K, K))
    degenerate = []
    off = ~np.eye(K, dtype=bool)
    for i in range(K):
        idx = np.asarray(anchors.get(i, []), dtype=np.intp)
        if idx.size == 0:
            raise ValidationError(f"class {i} has no anchor points")
        denom = 1.0 - float(np.mean(r[idx] * h_noisy[idx, i]))
        row = np.full(K, 1.0 / (K - 1))
        if denom < ALPHA_DENOM_MIN:
            log.warning("class %d: alpha denominator %.2e < %.0e, using uniform row", i, denom, ALPHA_DENOM_MIN)
            degenerate.append(i)
        else:
            raw[i] = h_noisy[idx].mean(axis=0) / denom
            clipped = np.clip(raw[i], 0.0, 1.0)
            clipped[i] = 0.0
            total = clipped.sum()
            if total > 0:
                row = clipped / total
                if abs(total - 1.0) > 0.05:
                    log.info("class %d: alpha row sum %.3f before normalization", i, total)
            else:
                degenerate.append(i)
        raw[i, i] = 0.0
        row[i] = 0.0
        alpha[i] = np.where(off[i], row, 0.0)
    return AlphaEstimate(alpha, raw, degenerate)


def assemble_T(i_obs, t_conf, mu, alpha):
    """Full T(x) for a sample observed as ``i_obs``.

    Row ``i_obs`` takes the confident diagonal ``t_conf``, every other row
    ``k`` takes ``mu[k]``; off-diagonals are ``alpha[i, j] * (1 - T_ii)``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    K = mu.shape[0]
    if not 0 <= i_obs < K:
        raise ValidationError(f"observed class {i_obs} out of range")
    if not 0.0 <= t_conf <= 1.0 or np.any((mu < 0) | (mu > 1)):
        raise ValidationError("diagonal entries must lie in [0, 1]")
    diag = mu.copy()
    diag[i_obs] = t_conf
    T = alpha * (1.0 - diag)[:, None]
    T[np.arange(K), np.arange(K)] = diag
    return T


def estimate_fixed_T(anchors, h_noisy):
    """Class-level transition matrix: row ``i`` is the mean of ``h_noisy`` over class-``i`` anchors."""
    h_noisy = np.asarray(h_noisy, dtype=np.float64)
    K = h_noisy.shape[1]
    T = np.zeros((K, K))
    for i in range(K):
        idx = np.asarray(anchors.get(i, []), dtype=np.intp)
        if idx.size == 0:
            raise ValidationError(f"class {i} has no anchor points")
        T[i] = h_noisy[idx].mean(axis=0)
    return T / T.sum(axis=1, keepdims=True)


@dataclass
class Diagnostics:
    """Per-run record of the estimated quantities, dumped as JSON."""

    alpha_raw: list = None
    alpha: list = None
    degenerate_rows: list = None
    mu: list = field(default_factory=list)
    beta_summary: list = field(default_factory=list)

    def record_alpha(self, est):
        self.alpha_raw = est.raw.tolist()
        self.alpha = est.alpha.tolist()
        self.degenerate_rows = list(est.degenerate)

    def record_epoch(self, mu, beta):
        self.mu.append(np.asarray(mu).tolist())
        q = np.quantile(beta, [0.0, 0.25, 0.5, 0.75, 1.0]) if len(beta) else [1.0] * 5
        self.beta_summary.append({
            "mean": float(np.mean(beta)) if len(beta) else 1.0,
            "quantiles": [float(v) for v in q],
            "clipped_low": int(np.sum(beta <= BETA_CLIP[0])),
            "clipped_high": int(np.sum(beta >= BETA_CLIP[1])),
        })

    def to_dict(self):
        return {
            "alpha_raw": self.alpha_raw,
            "alpha": self.alpha,
            "degenerate_rows": self.degenerate_rows,
            "mu": self.mu,
            "beta_summary": self.beta_summary,
        }

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
