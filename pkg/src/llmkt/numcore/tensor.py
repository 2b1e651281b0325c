"""Dense tensors with reverse-mode differentiation on top of numpy.

Every differentiable operation records its parents and a closure that maps
the output gradient to parent gradients. ``Tensor.backward`` walks the graph
in reverse topological order. Only leaves keep ``.grad`` afterwards.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Select float64 (tests, gradient checks) or float32 (faster training)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead > 0:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---------------------------------------------------------------- autograd
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p.requires_grad):
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data).astype(a.data.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * _sigmoid(x),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU; smooth everywhere."""
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C * 0.5
        d *= x
        d *= 1.0 - t * t
        d += 0.5 * (1.0 + t)
        d *= g
        return (d,)

    return _result(out, (a,), backward)


# ----------------------------------------------------------------- reductions
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -------------------------------------------------------------------- shaping
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def _scatter_rows(n_rows: int, ids: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Sum ``rows`` (N, d) into an (n_rows, d) array at ``ids`` (N,), in a fixed order."""
    out = np.zeros((n_rows, rows.shape[-1]), dtype=rows.dtype)
    if ids.size == 0:
        return out
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    uniq, starts = np.unique(sorted_ids, return_index=True)
    out[uniq] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    basic = _is_basic_index(index)

    def backward(g):
        if basic:
            full = np.zeros(shape, dtype=dtype)
            full[index] = g
            return (full,)
        # advanced indexing may repeat elements: scatter-add through flat positions
        pos = np.arange(a.data.size).reshape(shape)[index]
        flat = _scatter_rows(a.data.size, pos.reshape(-1), np.asarray(g, dtype=dtype).reshape(-1, 1))
        return (flat.reshape(shape),)

    return _result(a.data[index], (a,), backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        return (_scatter_rows(shape[0], ids.reshape(-1), g.reshape(-1, shape[-1])),)

    return _result(table.data[ids], (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def replace_rows(base: Tensor, rows: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` (..., n, d) with ``base[..., rows, :]`` overwritten.

    ``rows`` indexes the flattened leading dimensions (n_total = prod(shape[:-1])).
    The overwritten entries receive no gradient on the ``base`` side.
    """
    rows = np.asarray(rows, dtype=np.int64)
    shape = base.shape
    d = shape[-1]
    out = base.data.reshape(-1, d).copy()
    out[rows] = values.data.reshape(len(rows), d)
    out = out.reshape(shape)

    def backward(g):
        gflat = g.reshape(-1, d)
        gv = gflat[rows].reshape(values.shape) if values.requires_grad else None
        gb = None
        if base.requires_grad:
            gb = gflat.copy()
            gb[rows] = 0.0
            gb = gb.reshape(shape)
        return gb, gv

    return _result(out, (base, values), backward)


# --------------------------------------------------------------------- linalg
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd
            else:
                ga = g @ np.swapaxes(bd, -1, -2) if ad.ndim > 1 else (g[..., None, :] @ np.swapaxes(bd, -1, -2))[..., 0, :]
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g) if bd.ndim > 1 else g * ad
            elif bd.ndim == 1:
                gb = np.swapaxes(ad, -1, -2) @ g[..., None]
                gb = gb[..., 0]
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


# ------------------------------------------------------------ fused functions
def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0.

    A slice with every entry masked comes out as all zeros.
    """
    x = a.data
    if mask is None:
        m = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - m)
        out = e / np.sum(e, axis=axis, keepdims=True)
    else:
        x = np.where(mask, x, -np.inf)
        m = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - np.where(np.isfinite(m), m, 0.0))
        s = np.sum(e, axis=axis, keepdims=True)
        out = e / np.where(s > 0, s, 1.0)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (a,), backward)


def _masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """In-place masked softmax over the last axis of a freshly allocated array."""
    np.copyto(scores, -np.inf, where=np.logical_not(mask))
    m = np.max(scores, axis=-1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    scores -= m
    np.exp(scores, out=scores)
    s = np.sum(scores, axis=-1, keepdims=True)
    s[s == 0] = 1.0
    scores /= s
    return scores


def _softmax_grad(p: np.ndarray, dp: np.ndarray, dot: np.ndarray) -> np.ndarray:
    dp -= dot
    dp *= p
    return dp


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, scale: float | None = None,
              bias: np.ndarray | None = None) -> Tensor:
    """Fused ``softmax(mask(q k^T * scale + bias)) v`` over (..., T, dh) inputs.

    Fully masked query rows produce zeros. One graph node; the probability
    matrix is the only saved intermediate. ``bias`` is a constant.
    """
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    qd, kd, vd = q.data * q.data.dtype.type(scale), k.data, v.data
    scores = np.matmul(qd, np.swapaxes(kd, -1, -2))
    if bias is not None:
        scores += bias
    p = _masked_softmax(scores, mask)
    out = np.matmul(p, vd)

    def backward(g):
        gv = _unbroadcast(np.matmul(np.swapaxes(p, -1, -2), g), vd.shape) if v.requires_grad else None
        dp = np.matmul(g, np.swapaxes(vd, -1, -2))
        ds = _softmax_grad(p, dp, np.sum(dp * p, axis=-1, keepdims=True))
        gq = _unbroadcast(np.matmul(ds, kd) * scale, qd.shape) if q.requires_grad else None
        gk = _unbroadcast(np.matmul(np.swapaxes(ds, -1, -2), qd), kd.shape) if k.requires_grad else None
        return gq, gk, gv

    return _result(out, (q, k, v), backward)


def prefix_attention(q: Tensor, k_shared: Tensor, v_shared: Tensor, k_own: Tensor, v_own: Tensor,
                     mask_shared: np.ndarray, mask_own: np.ndarray, scale: float | None = None,
                     bias_shared: np.ndarray | None = None, bias_own: np.ndarray | None = None) -> Tensor:
    """Attention of K query groups over a shared key set plus each group's own keys.

    Shapes: ``q``, ``k_own``, ``v_own`` are (H, K, M, dh); ``k_shared`` and
    ``v_shared`` are (H, S, dh). ``mask_shared`` broadcasts to (K, M, S) and
    ``mask_own`` to (K, M, M'); the optional constant biases broadcast to the
    matching (H, K, M, .) score blocks. Softmax runs jointly over both key sets.
    Equivalent to concatenating the keys, without materialising per-group copies.
    """
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    qd = q.data * q.data.dtype.type(scale)
    ksd, vsd, kod, vod = k_shared.data, v_shared.data, k_own.data, v_own.data
    H, K, M, dh = qd.shape
    S = ksd.shape[1]
    Mo = kod.shape[2]
    flat_q = qd.reshape(H, K * M, dh)
    scores = np.empty((H, K, M, S + Mo), dtype=qd.dtype)
    scores[..., :S] = np.matmul(flat_q, np.swapaxes(ksd, -1, -2)).reshape(H, K, M, S)
    scores[..., S:] = np.matmul(qd, np.swapaxes(kod, -1, -2))
    if bias_shared is not None:
        scores[..., :S] += bias_shared
    if bias_own is not None:
        scores[..., S:] += bias_own
    mask = np.empty((K, M, S + Mo), dtype=bool)
    mask[..., :S] = mask_shared
    mask[..., S:] = mask_own
    p = _masked_softmax(scores, mask)
    p_shared, p_own = p[..., :S], p[..., S:]
    out = np.matmul(np.ascontiguousarray(p_shared).reshape(H, K * M, S), vsd).reshape(H, K, M, dh)
    out += np.matmul(p_own, vod)

    def backward(g):
        flat_g = g.reshape(H, K * M, dh)
        ps_flat = np.ascontiguousarray(p_shared).reshape(H, K * M, S)
        g_vs = np.matmul(np.swapaxes(ps_flat, -1, -2), flat_g)
        g_vo = np.matmul(np.swapaxes(p_own, -1, -2), g)
        dp = np.empty_like(p)
        dp[..., :S] = np.matmul(flat_g, np.swapaxes(vsd, -1, -2)).reshape(H, K, M, S)
        dp[..., S:] = np.matmul(g, np.swapaxes(vod, -1, -2))
        ds = _softmax_grad(p, dp, np.sum(dp * p, axis=-1, keepdims=True))
        ds_shared = np.ascontiguousarray(ds[..., :S]).reshape(H, K * M, S)
        ds_own = ds[..., S:]
        g_q = np.matmul(ds_shared, ksd).reshape(H, K, M, dh)
        g_q += np.matmul(ds_own, kod)
        g_q *= scale
        g_ks = np.matmul(np.swapaxes(ds_shared, -1, -2), flat_q)
        g_ko = np.matmul(np.swapaxes(ds_own, -1, -2), qd)
        return g_q, g_ks, g_vs, g_ko, g_vo

    return _result(out, (q, k_shared, v_shared, k_own, v_own), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    out = x - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with affine parameters."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


def bce_with_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean binary cross-entropy on logits; ``weights`` masks/weights entries."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=z.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("bce_with_logits: no weighted entries")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((per * w).sum() / total, dtype=z.dtype)

    def backward(g):
        return (g * w * (_sigmoid(z) - y) / total,)

    return _result(out, (logits,), backward)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean softmax cross-entropy over the last axis; targets are class ids."""
    z = logits.data
    t = np.asarray(targets, dtype=np.int64)
    flat = z.reshape(-1, z.shape[-1])
    tf = t.reshape(-1)
    w = np.ones(len(tf), dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no weighted entries")
    m = flat.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(flat - m).sum(axis=-1, keepdims=True))
    logp = flat - lse
    nll = -logp[np.arange(len(tf)), tf]
    out = np.asarray((nll * w).sum() / total, dtype=z.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(len(tf)), tf] -= 1.0
        return ((g * p * (w / total)[:, None]).reshape(z.shape),)

    return _result(out, (logits,), backward)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
