"""Training objectives and the entropy model-selection criterion."""
from __future__ import annotations

import numpy as np

from .autodiff import ContractError, Tensor, ops
from .autodiff.tensor import is_debug

IGNORE_INDEX = 255


def softmax_cross_entropy(logits, labels, ignore_index=IGNORE_INDEX):
    """Mean negative log-likelihood of the labelled class over non-ignored pixels.

    ``labels`` is an integer array of shape (N, H, W) or (H, W).
    """
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (n, h, w):
        raise ContractError(f"label shape {labels.shape} does not match logits spatial dims {(n, h, w)}")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ContractError("every pixel is ignored; cross-entropy mean is undefined")
    if np.any(labels[valid] >= k) or np.any(labels[valid] < 0):
        raise ContractError(f"label ids must lie in [0, {k}) or equal {ignore_index}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    nn, hh, ww = np.nonzero(valid)
    onehot[nn, labels[valid], hh, ww] = 1.0
    logp = ops.log_softmax_channel(logits)
    return ops.mul(ops.sum(ops.mul(logp, Tensor(onehot))), -1.0 / count)


def discrepancy(p1, p2, order=1):
    """Mean |p1 - p2|**order over every pixel and class."""
    if p1.shape != p2.shape:
        raise ContractError(f"discrepancy needs equal shapes, got {p1.shape} and {p2.shape}")
    if is_debug():
        for p in (p1, p2):
            if p.data.min() < 0 or p.data.max() > 1:
                raise ContractError("discrepancy inputs must be probabilities in [0, 1]")
    diff = ops.add(p1, ops.neg(p2))
    if order == 1:
        return ops.mean(ops.abs(diff))
    if order == 2:
        return ops.mean(ops.square(diff))
    raise ContractError(f"discrepancy order must be 1 or 2, got {order}")


def depth_mse(pred, target):
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ContractError(f"depth_mse needs equal shapes, got {pred.shape} and {target.shape}")
    return ops.mean(ops.square(ops.add(pred, ops.neg(target))))


def balanced_bce(pred, gt, from_logits=False, eps=1e-7):
    """Class-balanced boundary cross-entropy, summed over pixels.

    Edge pixels are weighted by the non-edge fraction and vice versa.  With
    ``from_logits`` the log-probabilities come from a stable log-sigmoid;
    otherwise ``pred`` holds probabilities, clipped to ``[eps, 1 - eps]``.
    """
    gt = np.asarray(gt)
    if gt.shape != pred.shape:
        gt = gt.reshape(pred.shape)
    if np.any((gt != 0) & (gt != 1)):
        raise ContractError("boundary ground truth must be binary")
    edge = gt.astype(pred.dtype)
    total = edge.size
    n_edge = float(edge.sum())
    w_edge = (total - n_edge) / total
    w_flat = n_edge / total
    if from_logits:
        log_p = ops.log_sigmoid(pred)
        log_q = ops.log_sigmoid(ops.neg(pred))
    else:
        if is_debug() and (pred.data.min() < 0 or pred.data.max() > 1):
            raise ContractError("boundary probabilities must lie in [0, 1]")
        clipped = Tensor._from_op(
            np.clip(pred.data, eps, 1 - eps), (pred,),
            lambda g: (g * ((pred.data > eps) & (pred.data < 1 - eps)),), "clip",
        )
        log_p = ops.log(clipped)
        log_q = ops.log(ops.add(ops.neg(clipped), 1.0))
    term_edge = ops.sum(ops.mul(log_p, Tensor(edge * w_edge)))
    term_flat = ops.sum(ops.mul(log_q, Tensor((1.0 - edge) * w_flat)))
    return ops.neg(ops.add(term_edge, term_flat))


def multitask_total(l_seg, l_depth_src, l_depth_tgt=None, l_boundary=None, log_vars=None, tasks="dual"):
    """Uncertainty-weighted multitask objective.

    ``sum_i (exp(-s_i) / 2 * L_i + s_i) + L_depth_tgt`` where ``s_i = log sigma_i^2``
    are the entries of ``log_vars`` (segmentation, depth, boundary).  The target
    depth term carries no uncertainty weight.
    """
    if tasks not in ("dual", "triple"):
        raise ContractError(f"multitask_total needs tasks 'dual' or 'triple', got {tasks!r}")
    if l_seg is None or l_depth_src is None:
        raise ContractError("multitask_total needs both the segmentation and source depth losses")
    if tasks == "triple" and l_boundary is None:
        raise ContractError("triple task set needs the boundary loss")
    if tasks == "dual" and l_boundary is not None:
        raise ContractError("dual task set takes no boundary loss")
    if log_vars is None:
        log_vars = Tensor(np.zeros(3, dtype=l_seg.dtype))
    losses = [l_seg, l_depth_src] + ([l_boundary] if tasks == "triple" else [])
    total = None
    for i, li in enumerate(losses):
        s = _pick(log_vars, i)
        term = ops.add(ops.mul(ops.mul(ops.exp(ops.neg(s)), li), 0.5), s)
        total = term if total is None else ops.add(total, term)
    if l_depth_tgt is not None:
        total = ops.add(total, l_depth_tgt)
    return total


def _pick(vec, i):
    size = vec.shape[0]

    def backward(g):
        out = np.zeros(size, dtype=g.dtype)
        out[i] = g
        return (out,)

    return Tensor._from_op(np.asarray(vec.data[i]), (vec,), backward, "index")


def mean_entropy(probs):
    """Mean over pixels of the per-pixel class entropy, in nats."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    p = p.astype(np.float64)
    # 0 log 0 = 0, while NaN probabilities still give a NaN entropy
    plogp = p * np.log(np.where(p > 0, p, 1.0))
    return float(-plogp.sum(axis=1).mean())
