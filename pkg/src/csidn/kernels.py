"""Backend selection for the forward-correction kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Set ``CSIDN_PURE_PYTHON=1`` to force the fallback.
"""

import os
from typing import NamedTuple

import numpy as np

from csidn import _kernels_py

try:
    if os.environ.get("CSIDN_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from csidn import _kernels as _compiled
except ImportError:
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


class FactoredTransitions(NamedTuple):
    """Per-sample T(x) held as factors instead of ``n x K x K`` matrices.

    Row ``y_noisy`` of each T(x) has diagonal ``clip(r * beta)``; every other
    row ``k`` has diagonal ``mu[k]``; off-diagonals are ``alpha[i, j] * (1 - T_ii)``.
    """

    r: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    alpha: np.ndarray
    floor: float = 1e-3

    def take(self, idx):
        return self._replace(r=self.r[idx], beta=self.beta[idx])

    def matrices(self, labels):
        return _impl.assemble_stack(labels, self.r, self.beta, self.mu, self.alpha, self.floor)


def backends():
    """Available kernel modules keyed by name."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def corrected_loss_grad(probs, labels, T, eps=1e-12):
    return _impl.corrected_loss_grad(probs, labels, T, eps)


def ilfc_loss_grad(probs, labels, factors: FactoredTransitions, eps=1e-12):
    f = factors
    return _impl.ilfc_loss_grad(probs, labels, f.r, f.beta, f.mu, f.alpha, f.floor, eps)


def assemble_stack(labels, r, beta, mu, alpha, floor=1e-3):
    return _impl.assemble_stack(labels, r, beta, mu, alpha, floor)


def ece_bins(confidences, correct, n_bins):
    return _impl.ece_bins(confidences, correct, n_bins)
