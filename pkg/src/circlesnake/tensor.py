"""Minimal reverse-mode autodiff over numpy arrays.

Only the operators the detector and the contour network need are provided.
Every op takes and returns :class:`Tensor`; gradients are recorded only when
at least one input has ``requires_grad`` set.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "as_tensor",
    "record",
    "add",
    "mul",
    "sub",
    "neg",
    "scale",
    "sum",
    "mean",
    "log",
    "abs",
    "relu",
    "sigmoid",
    "clamped_sigmoid",
    "reshape",
    "transpose",
    "concat",
    "gather",
    "conv2d",
    "circular_conv",
    "batch_norm",
    "max_pool2d",
    "max_over",
    "broadcast_to",
    "upsample2x",
    "bilinear_sample",
    "grad_check",
]


class Tensor:
    """Dense array node in a recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise RuntimeError("cycle detected in recorded graph")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and state.get(id(p)) != 2:
                if state.get(id(p)) == 1:
                    raise RuntimeError("cycle detected in recorded graph")
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op whose vector-Jacobian product is ``backward``.

    ``backward(g)`` returns one gradient (or None) per parent.
    """
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # only scalar-like operands are broadcast
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_binary(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_binary(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_binary(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_binary(a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return record(np.asarray(a.data.sum()), (a,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return record(np.asarray(a.data.mean()), (a,),
                  lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def log(a: Tensor) -> Tensor:
    x = a.data
    return record(np.log(x), (a,), lambda g: (g / x,))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    x = a.data
    return record(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return record(y, (a,), lambda g: (g * y * (1 - y),))


def clamped_sigmoid(a: Tensor, eps: float = 1e-4) -> Tensor:
    """Sigmoid clipped to ``[eps, 1 - eps]``; zero gradient where clipped."""
    y = 1.0 / (1.0 + np.exp(-a.data))
    inside = (y > eps) & (y < 1 - eps)
    out = np.clip(y, eps, 1 - eps).astype(a.dtype, copy=False)
    return record(out, (a,), lambda g: (g * y * (1 - y) * inside,))


# -- shape ------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def gather(a: Tensor, index: tuple) -> Tensor:
    """Fancy-index ``a``; repeated indices accumulate in the backward pass."""
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return record(a.data[index], (a,), backward)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    """Broadcast a size-1 axis (e.g. a pooled vertex axis) back to ``shape``."""
    src = a.shape
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)
    return record(np.broadcast_to(a.data, shape).copy(), (a,),
                  lambda g: (g.sum(axis=axes, keepdims=True),))


# -- convolutions -----------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """2-D cross-correlation. ``x`` is (B, C, H, W), ``w`` is (O, C, k, k)."""
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if C != Cw or k != k2:
        raise ValueError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    p = k // 2 if padding is None else padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    if k == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = cols.transpose(1, 0, 2, 3).reshape(C, -1)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        # win: B, C, Ho, Wo, k, k
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, -1)
    w2 = w.data.reshape(O, -1)
    out = w2 @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, k, k, B, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return record(np.ascontiguousarray(out), parents, backward)


def circular_conv(f: Tensor, k: Tensor, bias: Tensor | None = None) -> Tensor:
    """Periodic 1-D convolution along the last axis.

    ``f`` is (B, D_in, N) or (D_in, N); ``k`` is (D_out, D_in, 2r+1). Output
    vertex ``i`` is ``sum_j f[(i + j) mod N] * k[j]`` for ``j`` in ``[-r, r]``.
    """
    squeeze = f.ndim == 2
    if squeeze:
        f = reshape(f, (1,) + f.shape)
    B, D, N = f.shape
    O, Dk, K = k.shape
    if Dk != D:
        raise ValueError(f"kernel expects {Dk} input channels, got {D}")
    if K % 2 != 1:
        raise ValueError("kernel size must be odd")
    r = K // 2
    if N <= 2 * r:
        raise ValueError(f"contour length {N} too short for kernel size {K}")
    if K == 1:
        cols = f.data.transpose(1, 0, 2).reshape(D, B * N)
    else:
        idx = (np.arange(N)[None, :] + np.arange(-r, r + 1)[:, None]) % N  # K, N
        cols = f.data[:, :, idx].transpose(1, 2, 0, 3).reshape(D * K, B * N)
    w2 = k.data.reshape(O, D * K)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(O, B, N).transpose(1, 0, 2)

    def backward(g):
        g2 = g.transpose(1, 0, 2).reshape(O, B * N)
        gk = (g2 @ cols.T).reshape(k.shape) if k.requires_grad else None
        gb = g2.sum(axis=1) if (bias is not None and bias.requires_grad) else None
        gf = None
        if f.requires_grad:
            gcols = (w2.T @ g2).reshape(D, K, B, N)
            gf = np.zeros((B, D, N), dtype=f.dtype)
            for j in range(K):
                # out_i reads f_{i + j - r}, so scatter back shifted by (j - r)
                gf += np.roll(gcols[:, j].transpose(1, 0, 2), j - r, axis=2)
        return (gf, gk, gb) if bias is not None else (gf, gk)

    parents = (f, k, bias) if bias is not None else (f, k)
    res = record(np.ascontiguousarray(out), parents, backward)
    return reshape(res, res.shape[1:]) if squeeze else res


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Channel-wise normalization for (B, C, ...) inputs.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if training:
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        n = x.data.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * m
        running_var *= 1 - momentum
        running_var += momentum * v * (n / max(n - 1, 1))
    else:
        m, v = running_mean, running_var
    inv = (1.0 / np.sqrt(v + eps)).astype(x.dtype)
    xhat = (x.data - m.reshape(bshape)) * inv.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            if training:
                n = x.data.size // x.shape[1]
                gx = (inv.reshape(bshape) / n) * (
                    n * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, gg, gbeta

    return record(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling; H and W are cropped to multiples."""
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    xr = x.data[:, :, :Ho * size, :Wo * size].reshape(B, C, Ho, size, Wo, size)
    out = xr.max(axis=(3, 5))
    # first maximal element in each window gets the gradient
    flat = xr.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    arg = flat.argmax(axis=-1)

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=x.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[:, :, :Ho * size, :Wo * size] = gflat.reshape(B, C, Ho, Wo, size, size) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size)
        return (gx,)

    return record(out, (x,), backward)


def max_over(x: Tensor, axis: int = -1) -> Tensor:
    """Max along ``axis`` keeping it as a size-1 dimension."""
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(gx, arg, g, axis=axis)
        return (gx,)

    return record(out, (x,), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of (B, C, H, W)."""
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return record(out, (x,),
                  lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


def bilinear_sample(fmap: Tensor, points, batch_index=None) -> Tensor:
    """Sample ``fmap`` at real-valued (x, y) pixel coordinates.

    ``fmap`` is (D, H, W), or (B, D, H, W) together with ``batch_index`` giving
    the image of each point. Points outside ``[0, W-1] x [0, H-1]`` are clamped
    to the border. Returns (D, P). Differentiable in ``fmap`` only.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    batched = fmap.ndim == 4
    if batched:
        B, D, H, W = fmap.shape
        bi = np.zeros(len(pts), dtype=np.intp) if batch_index is None \
            else np.asarray(batch_index, dtype=np.intp)
    else:
        D, H, W = fmap.shape
    P = len(pts)
    if P == 0:
        return record(np.zeros((D, 0), dtype=fmap.dtype), (fmap,),
                      lambda g: (np.zeros(fmap.shape, dtype=fmap.dtype),))
    x = np.clip(pts[:, 0], 0, W - 1)
    y = np.clip(pts[:, 1], 0, H - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0).astype(fmap.dtype)
    fy = (y - y0).astype(fmap.dtype)
    weights = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    corners = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
    if batched:
        flat = fmap.data.transpose(1, 0, 2, 3).reshape(D, -1)
        lin = [bi * H * W + yy * W + xx for yy, xx in corners]
    else:
        flat = fmap.data.reshape(D, -1)
        lin = [yy * W + xx for yy, xx in corners]
    out = np.zeros((D, P), dtype=fmap.dtype)
    for li, wt in zip(lin, weights):
        out += flat[:, li] * wt

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=fmap.dtype)
        size = flat.shape[1]
        for li, wt in zip(lin, weights):
            gw = g * wt
            for d in range(D):
                gflat[d] += np.bincount(li, weights=gw[d], minlength=size)
        if batched:
            return (gflat.reshape(D, B, H, W).transpose(1, 0, 2, 3),)
        return (gflat.reshape(fmap.shape),)

    return record(out, (fmap,), backward)


# -- verification -----------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``x`` should be 64-bit for meaningful results.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        with np.errstate(all="ignore"):
            flat[i] = orig + h
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            coord = tuple(int(c) for c in np.unravel_index(i, base.shape))
            raise FloatingPointError(f"non-finite function value at coordinate {coord}")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def parameters_with_grad(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.grad is not None]
