"""Dense NHWC tensors with tape-based reverse-mode autodiff.

Every operation records its inputs and a vector-Jacobian closure on the
output tensor; ``backward`` replays the tape in reverse topological order.
Kernels are written so that each batch element is computed independently
(batched GEMMs, shift-and-accumulate depthwise convolutions), which makes
outputs bitwise independent of how a batch was grouped or permuted.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense float32/float64 array plus its place in the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        self.data = _as_array(data, dtype)
        if self.data.ndim > 0 and min(self.data.shape, default=1) < 1:
            raise DimensionError("all tensor dims must be >= 1")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar over the public elementwise suite
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(self, other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A named leaf tensor; ``trainable`` gates both autodiff and the optimizer."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def _const_like(t: Tensor, value) -> Tensor:
    return Tensor(np.full((), value, dtype=t.dtype))


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"mixed-dtype op: {sorted(str(d) for d in dtypes)}")


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _topo_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node in visited:
            continue
        visited.add(node)
        stack.append((node, True))
        for p in node._parents:
            if p not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable grad-enabled leaf.

    Gradients add across calls until ``zero_grad``; the tape is traversed
    exactly once per call.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    order = _topo_order(loss)
    grads: dict = {loss: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node, None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(p)
            grads[p] = pg if acc is None else acc + pg


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise suite


def _binary_prep(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    _check_same_dtype(a, b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"elementwise shapes {a.shape} vs {b.shape}; only equal shapes or a scalar broadcast")
    return a, b


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if len(shape) == 0 else np.full(shape, np.sum(g))


def add(a, b):
    a, b = _binary_prep(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b):
    a, b = _binary_prep(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b):
    a, b = _binary_prep(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def gelu(x: Tensor) -> Tensor:
    inv_sqrt2 = np.asarray(0.7071067811865476, dtype=x.dtype)
    phi = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
    out = x.data * phi

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * np.asarray(0.3989422804014327, dtype=x.dtype)
        return (g * (phi + x.data * pdf),)

    return _make(out.astype(x.dtype), (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(s.astype(x.dtype), (x,), lambda g: (g * s * (1.0 - s),))


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at 0 via np.sign
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims or x.ndim == 0 else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if x.ndim else 1
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims or x.ndim == 0 else np.expand_dims(g, axes)
        return ((np.broadcast_to(gg, x.shape) / count).astype(x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim if x.ndim else 0
    if x.ndim == 0:
        raise DimensionError("softmax needs at least one axis")
    z = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=ax, keepdims=True)

    def vjp(g):
        dot = np.sum(g * y, axis=ax, keepdims=True)
        return (y * (g - dot),)

    return _make(y.astype(x.dtype), (x,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    expanded = np.broadcast_to(x.data, shape)

    def vjp(g):
        extra = g.ndim - x.ndim
        gg = g.sum(axis=tuple(range(extra))) if extra else g
        keep = tuple(i for i, d in enumerate(x.shape) if d == 1 and gg.shape[i] != 1)
        if keep:
            gg = gg.sum(axis=keep, keepdims=True)
        return (gg.reshape(x.shape),)

    return _make(np.ascontiguousarray(expanded), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _check_same_dtype(*tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    ax = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[sl]), (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        else:
            gb = None
        return (ga, gb)

    return _make(out, (a, b), vjp)


def normalize_l2(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    ax = axis % x.ndim
    n = np.sqrt(np.sum(x.data * x.data, axis=ax, keepdims=True) + eps)
    y = x.data / n

    def vjp(g):
        dot = np.sum(g * y, axis=ax, keepdims=True)
        return ((g - y * dot) / n,)

    return _make(y.astype(x.dtype), (x,), vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last dim, broadcast over all leading dims."""
    _check_same_dtype(x, w, *([b] if b is not None else []))
    cin, cout = w.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"linear: last dim {x.shape[-1]} != Cin {cin}")
    lead = x.shape[:-1]
    n = lead[0] if len(lead) >= 1 else 1
    x3 = x.data.reshape(n, -1, cin) if len(lead) >= 1 else x.data.reshape(1, 1, cin)
    out = np.matmul(x3, w.data)  # per-sample GEMMs: batch-composition invariant
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, cout)

    def vjp(g):
        g3 = g.reshape(n, -1, cout) if len(lead) >= 1 else g.reshape(1, 1, cout)
        gx = np.matmul(g3, w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x3.reshape(-1, cin).T @ g3.reshape(-1, cout) if w.requires_grad else None
        gb = g3.sum(axis=(0, 1)) if b is not None and b.requires_grad else None
        if b is None:
            return (gx, gw)
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, vjp)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ConfigError(f"conv output size not integer: size={size} k={k} stride={stride} pad={pad}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2D convolution on NHWC input with (k, k, Cin/groups, Cout) weights."""
    _check_same_dtype(x, w, *([b] if b is not None else []))
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input and kkio weights, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ConfigError("conv2d requires stride >= 1 and pad >= 0")
    n, h, wdt, cin = x.shape
    k, k2, cing, cout = w.shape
    if k != k2:
        raise DimensionError("conv2d kernels must be square")
    if cin % groups != 0 or cout % groups != 0 or cing != cin // groups:
        raise DimensionError(f"conv2d group mismatch: Cin={cin} groups={groups} weight Cin/g={cing} Cout={cout}")
    oh = _conv_out_size(h, k, stride, pad)
    ow = _conv_out_size(wdt, k, stride, pad)

    if k == 1 and stride == 1 and pad == 0 and groups == 1:
        w2 = reshape(w, (cin, cout))
        return linear(x, w2, b)

    if groups == cin and cout == cin:
        return _depthwise_conv2d(x, w, b, stride, pad, oh, ow)

    return _grouped_im2col_conv2d(x, w, b, stride, pad, groups, oh, ow)


def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _depthwise_conv2d(x, w, b, stride, pad, oh, ow):
    n, h, wdt, c = x.shape
    k = w.shape[0]
    xp = _pad_hw(x.data, pad)
    wd = w.data.reshape(k, k, c)
    out = np.zeros((n, oh, ow, c), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            out += xp[:, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride, :] * wd[ky, kx]
    if b is not None:
        out += b.data

    def vjp(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride, :] += g * wd[ky, kx]
            gx = gxp[:, pad : pad + h, pad : pad + wdt, :] if pad else gxp
        if w.requires_grad:
            gw = np.zeros_like(wd)
            for ky in range(k):
                for kx in range(k):
                    patch = xp[:, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride, :]
                    gw[ky, kx] = np.sum(patch * g, axis=(0, 1, 2))
            gw = gw.reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp)


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # (N, OH, OW, k, k, C) gathered view, materialized as (N, OH*OW, k*k*C)
    n, _, _, c = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, OH, OW, C, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n, oh * ow, k * k * c)


def _grouped_im2col_conv2d(x, w, b, stride, pad, groups, oh, ow):
    n, h, wdt, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    cin_g, cout_g = cin // groups, cout // groups
    xp = _pad_hw(x.data, pad)
    cols_by_group, outs = [], []
    for gi in range(groups):
        xg = np.ascontiguousarray(xp[..., gi * cin_g : (gi + 1) * cin_g])
        cols = _im2col(xg, k, stride, oh, ow)
        w2 = w.data[:, :, :, gi * cout_g : (gi + 1) * cout_g].reshape(k * k * cin_g, cout_g)
        outs.append(np.matmul(cols, w2))
        cols_by_group.append(cols)
    out = np.concatenate(outs, axis=-1).reshape(n, oh, ow, cout)
    if b is not None:
        out = out + b.data

    def vjp(g):
        g2 = g.reshape(n, oh * ow, cout)
        gx = np.zeros((n, h + 2 * pad, wdt + 2 * pad, cin), dtype=x.dtype) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for gi in range(groups):
            gg = g2[..., gi * cout_g : (gi + 1) * cout_g]
            w2 = w.data[:, :, :, gi * cout_g : (gi + 1) * cout_g].reshape(k * k * cin_g, cout_g)
            if gw is not None:
                cols = cols_by_group[gi]
                gw[:, :, :, gi * cout_g : (gi + 1) * cout_g] = (
                    cols.reshape(-1, k * k * cin_g).T @ gg.reshape(-1, cout_g)
                ).reshape(k, k, cin_g, cout_g)
            if gx is not None:
                dcols = np.matmul(gg, w2.T).reshape(n, oh, ow, k, k, cin_g)
                view = gx[..., gi * cin_g : (gi + 1) * cin_g]
                for ky in range(k):
                    for kx in range(k):
                        view[:, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride, :] += dcols[:, :, :, ky, kx, :]
        if gx is not None and pad:
            gx = np.ascontiguousarray(gx[:, pad : pad + h, pad : pad + wdt, :])
        gb = g.sum(axis=(0, 1, 2)) if b is not None and b.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, vjp)


# ---------------------------------------------------------------------------
# normalization / pixel rearrangement


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the channel (last) dim to zero mean / unit variance per position."""
    _check_same_dtype(x, gamma, beta)
    if eps <= 0:
        raise ConfigError("layer_norm eps must be > 0")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("layer_norm gamma/beta must have shape (C,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = np.sum(g * y, axis=lead) if gamma.requires_grad else None
        gbeta = np.sum(g, axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gy = g * gamma.data
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - y * np.mean(gy * y, axis=-1, keepdims=True))
        return (gx, ggamma, gbeta)

    return _make(out.astype(x.dtype), (x, gamma, beta), vjp)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    n, h, w, c = x.shape
    if h % r or w % r:
        raise DimensionError(f"pixel_unshuffle: H={h}, W={w} not divisible by r={r}")
    out = x.data.reshape(n, h // r, r, w // r, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // r, w // r, r * r * c)

    def vjp(g):
        back = g.reshape(n, h // r, w // r, r, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)
        return (np.ascontiguousarray(back),)

    return _make(np.ascontiguousarray(out), (x,), vjp)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    n, h, w, c2 = x.shape
    if c2 % (r * r):
        raise DimensionError(f"pixel_shuffle: C={c2} not divisible by r^2={r * r}")
    c = c2 // (r * r)
    out = x.data.reshape(n, h, w, r, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * r, w * r, c)

    def vjp(g):
        back = g.reshape(n, h, r, w, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c2)
        return (np.ascontiguousarray(back),)

    return _make(np.ascontiguousarray(out), (x,), vjp)


# ---------------------------------------------------------------------------
# batch routing primitives


def gather_batch(x: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), vjp)


def scatter_batch(parts: Sequence[tuple], batch: int) -> Tensor:
    """Reassemble per-group outputs ``(indices, Tensor)`` into original batch order."""
    tensors = [t for _, t in parts]
    _check_same_dtype(*tensors)
    inner = tensors[0].shape[1:]
    out = np.empty((batch, *inner), dtype=tensors[0].dtype)
    covered = np.zeros(batch, dtype=bool)
    for idx, t in parts:
        idx = np.asarray(idx, dtype=np.int64)
        if t.shape[0] != len(idx) or t.shape[1:] != inner:
            raise DimensionError("scatter_batch: group tensor shape mismatch")
        out[idx] = t.data
        covered[idx] = True
    if not covered.all():
        raise RuntimeError("internal: dispatch plan does not cover the batch")

    index_lists = [np.asarray(idx, dtype=np.int64) for idx, _ in parts]

    def vjp(g):
        return tuple(np.ascontiguousarray(g[idx]) for idx in index_lists)

    return _make(out, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# losses


def cross_entropy_logits(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer class labels."""
    lab = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if lab.shape != (n,):
        raise DimensionError(f"labels shape {lab.shape} != ({n},)")
    if lab.min() < 0 or lab.max() >= k:
        from .errors import DataError

        raise DataError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    logp = z - lse
    loss = -np.mean(logp[np.arange(n), lab])

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), lab] -= 1.0
        return (p * (np.asarray(g, dtype=logits.dtype) / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int = 20,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic gradients and central finite differences.

    ``f`` must be a deterministic closure returning a scalar Tensor; run it in
    double precision. At most ``max_coords`` coordinates are sampled per
    parameter (all of them when the parameter is small).
    """
    rng = rng or np.random.default_rng(0)
    zero_grads(params)
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        size = p.data.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp = float(f().data)
            flat[c] = orig - h
            lm = float(f().data)
            flat[c] = orig
            numeric = (lp - lm) / (2.0 * h)
            ana = float(a.reshape(-1)[c])
            rel = abs(ana - numeric) / (abs(ana) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst
