"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Every operation that involves at least one
gradient-requiring input records its parents and a backward closure on the
output; those links form the tape. ``Tensor.backward`` walks the tape in
reverse topological order, visiting each node exactly once, and accumulates
gradients into the leaves. Operations on inputs that do not require gradients
build no tape at all, which keeps evaluation loops (finite differences,
validation) cheap.

Double precision is the default; single precision is supported by passing
float32 data in.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor.

        ``seed`` defaults to ones; for the usual scalar loss that is 1.0.
        """
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting. ``b`` may be a plain ndarray mask."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        b_arr = np.asarray(b)
        out_data = a.data * b_arr

        def backward_const(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b_arr, a.data.shape))

        return _make(out_data, (a,), backward_const)

    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(out_data, (a,), backward)


def moveaxis(a, src: int, dst: int) -> Tensor:
    a = _as_tensor(a)
    out_data = np.moveaxis(a.data, src, dst)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.moveaxis(g, dst, src))

    return _make(out_data, (a,), backward)


def transpose_last(a) -> Tensor:
    """Swap the last two axes."""
    return moveaxis(a, -1, -2)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(g):
        if a.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            a._accumulate(g * (cdf + x * pdf))

    return _make(out_data, (a,), backward)


def dropout(a, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Identity when not training or p == 0."""
    a = _as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, keep)


def embedding_lookup(table, indices) -> Tensor:
    """Select rows of ``table`` ([V, d]) by an integer array of any shape."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding index out of range: [{idx.min()}, {idx.max()}] vs table with {table.data.shape[0]} rows"
        )
    out_data = table.data[idx]

    def backward(g):
        if not table.requires_grad:
            return
        v, d = table.data.shape
        idx_flat = idx.ravel()
        g_flat = g.reshape(-1, d)
        gt = np.empty_like(table.data)
        for c in range(d):
            gt[:, c] = np.bincount(idx_flat, weights=g_flat[:, c], minlength=v)
        table._accumulate(gt)

    return _make(out_data, (table,), backward)


def gather_rows(x, indices) -> Tensor:
    """Per-batch row pick: out[b] = x[b, indices[b]] for x of shape [B, N, d]."""
    x = _as_tensor(x)
    idx = np.asarray(indices)
    bsz = x.data.shape[0]
    out_data = x.data[np.arange(bsz), idx]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[np.arange(bsz), idx] = g
            x._accumulate(gx)

    return _make(out_data, (x,), backward)


def split_heads(x, num_heads: int) -> Tensor:
    """[..., n, d] -> [..., num_heads, n, d // num_heads]."""
    x = _as_tensor(x)
    *lead, n, d = x.data.shape
    if d % num_heads:
        raise ValueError(f"hidden dim {d} not divisible by {num_heads} heads")
    return moveaxis(reshape(x, (*lead, n, num_heads, d // num_heads)), -2, -3)


def concat_heads(x) -> Tensor:
    """[..., num_heads, n, d_head] -> [..., n, num_heads * d_head]."""
    x = _as_tensor(x)
    *lead, h, n, dh = x.data.shape
    return reshape(moveaxis(x, -3, -2), (*lead, n, h * dh))


def biased_masked_softmax(logits, bias, mask=None) -> Tensor:
    """Row-wise softmax of (logits + bias) over the last axis.

    ``mask`` is an optional boolean array (True = position participates);
    masked entries get zero weight. Raises on any fully-masked row.
    """
    logits, bias = _as_tensor(logits), _as_tensor(bias)
    z = logits.data + bias.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if np.any(~mask.any(axis=-1)):
            raise ValueError("softmax row is fully masked")
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        dz = out_data * (g - inner)
        if logits.requires_grad:
            logits._accumulate(_unbroadcast(dz, logits.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(dz, bias.data.shape))

    return _make(out_data, (logits, bias), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gamma.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gx_hat - m1 - xhat * m2) * inv_std)

    return _make(out_data, (x, gamma, beta), backward)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error against a constant target."""
    pred = _as_tensor(pred)
    t = np.asarray(target, dtype=pred.data.dtype)
    diff = pred.data - t
    out_data = np.abs(diff).mean()

    def backward(g):
        if pred.requires_grad:
            pred._accumulate(g * np.sign(diff) / diff.size)

    return _make(out_data, (pred,), backward)


def bce_with_logits(pred, target) -> Tensor:
    """Mean binary cross-entropy on raw logits, numerically stable."""
    pred = _as_tensor(pred)
    t = np.asarray(target, dtype=pred.data.dtype)
    x = pred.data
    out_data = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()

    def backward(g):
        if pred.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-x))
            pred._accumulate(g * (sig - t) / x.size)

    return _make(out_data, (pred,), backward)


def finite_difference_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be pure. The relative error
    per coordinate is |g_fd - g_ad| / max(1, |g_fd|, |g_ad|).
    """
    xg = Tensor(x.data.copy(), requires_grad=True)
    out = f(xg)
    if out.data.size != 1:
        raise ValueError("finite_difference_check needs a scalar-valued function")
    out.backward()
    g_ad = xg.grad.copy() if xg.grad is not None else np.zeros_like(x.data)

    base = x.data.copy()
    g_fd = np.zeros_like(base)
    flat = base.ravel()
    fd_flat = g_fd.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base)).item()
        flat[i] = orig - h
        fm = f(Tensor(base)).item()
        flat[i] = orig
        fd_flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(g_fd), np.abs(g_ad)))
    return float(np.max(np.abs(g_fd - g_ad) / denom)) if base.size else 0.0


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal samples clipped at two standard deviations."""
    return np.clip(rng.standard_normal(shape) * std, -2.0 * std, 2.0 * std).astype(dtype)
