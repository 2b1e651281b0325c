"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(function: Callable[[], Tensor], param: Tensor, h: float, indices=None) -> np.ndarray:
    """Central differences of ``function()`` w.r.t. ``param`` (optionally a subset of flat indices)."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(function().data)
        flat[i] = orig - h
        fm = float(function().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def grad_check(function: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    For each parameter the error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    over the checked entries (0 when both are identically zero). ``max_entries``
    samples that many entries per parameter to bound the cost.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.grad = None
    loss = function()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("non-finite loss in grad_check")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError("non-finite analytic gradient")
        indices = None
        if max_entries is not None and p.size > max_entries:
            indices = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        numeric = numeric_grad(function, p, h, indices)
        if not np.all(np.isfinite(numeric)):
            raise FloatingPointError("non-finite numeric gradient")
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        if indices is not None:
            a, n = a[indices], n[indices]
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.max(np.abs(a - n)) / scale))
    for p in params:
        p.grad = None
    return worst
