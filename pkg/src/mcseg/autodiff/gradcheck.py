"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def grad_check(f, inputs, eps=1e-4, mask=None):
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps a list of tensors to a scalar tensor.  Inputs are promoted to
    float64.  Per coordinate the error is
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.  ``mask`` optionally lists
    one boolean array per input selecting which coordinates to check (used to
    stay away from kinks).
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    f(leaves).backward()
    worst = 0.0
    for idx, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        base = arrays[idx]
        sel = np.ones(base.shape, bool) if mask is None or mask[idx] is None else np.asarray(mask[idx], bool)
        for pos in zip(*np.nonzero(sel)):
            orig = base[pos]
            base[pos] = orig + eps
            fp = f([Tensor(a) for a in arrays]).item()
            base[pos] = orig - eps
            fm = f([Tensor(a) for a in arrays]).item()
            base[pos] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[pos] - numeric) / max(1e-8, abs(analytic[pos]) + abs(numeric))
            worst = max(worst, err)
    return worst
