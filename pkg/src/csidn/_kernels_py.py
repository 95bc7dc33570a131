"""Pure-numpy implementations of the forward-correction kernels.

These are the reference versions; ``_kernels.pyx`` mirrors them loop for loop.
Both return ``(losses, dlogits)`` where ``dlogits`` is the gradient of each
sample's loss with respect to the pre-softmax logits.
"""

import numpy as np


def _softmax_backprop(probs, dprobs):
    return probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))


def _corrected_from_stack(probs, labels, T, eps):
    n = probs.shape[0]
    rows = np.arange(n)
    # q_j = sum_i T_ij p_i
    q = np.einsum("ni,nij->nj", probs, T)
    qy = q[rows, labels]
    live = qy >= eps
    losses = -np.log(np.maximum(qy, eps))
    dprobs = np.where(live[:, None], -T[rows, :, labels] / np.maximum(qy, eps)[:, None], 0.0)
    return losses, _softmax_backprop(probs, dprobs)


def corrected_loss_grad(probs, labels, T, eps=1e-12):
    """Forward-corrected cross-entropy with one ``K x K`` matrix per sample."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    T = np.asarray(T, dtype=np.float64)
    return _corrected_from_stack(probs, labels, T, eps)


def assemble_stack(labels, r, beta, mu, alpha, floor=1e-3):
    """Materialize per-sample transition matrices, shape ``(n, K, K)``."""
    labels = np.asarray(labels, dtype=np.intp)
    n = labels.shape[0]
    K = mu.shape[0]
    diag = np.broadcast_to(mu, (n, K)).copy()
    diag[np.arange(n), labels] = np.clip(np.asarray(r) * np.asarray(beta), floor, 1.0)
    T = alpha[None, :, :] * (1.0 - diag)[:, :, None]
    idx = np.arange(K)
    T[:, idx, idx] = diag
    return T


def ilfc_loss_grad(probs, labels, r, beta, mu, alpha, floor=1e-3, eps=1e-12):
    """Instance-level corrected loss with T(x) built from its factors."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    T = assemble_stack(labels, r, beta, np.asarray(mu, dtype=np.float64),
                       np.asarray(alpha, dtype=np.float64), floor)
    return _corrected_from_stack(probs, labels, T, eps)


def ece_bins(confidences, correct, n_bins):
    """Per-bin (count, confidence sum, correct sum) over equal-width bins."""
    conf = np.asarray(confidences, dtype=np.float64)
    idx = np.minimum((conf * n_bins).astype(np.intp), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=np.asarray(correct, dtype=np.float64), minlength=n_bins)
    return counts, conf_sum, acc_sum
