"""Small reverse-mode autodiff engine over numpy arrays.

Every op records its inputs and a closure mapping the output gradient to
input gradients. ``backward`` walks the recorded nodes once, newest first.
Arrays keep whatever dtype they were created with: float32 for training,
float64 for gradient checks.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ids = itertools.count()
_grad_enabled = True


class NumericError(FloatingPointError):
    """A NaN or infinity appeared in a forward value or a gradient."""

    def __init__(self, op: str, where: str = "forward", step: int | None = None):
        self.op = op
        self.where = where
        self.step = step
        msg = f"non-finite value in {where} of op '{op}'"
        if step is not None:
            msg += f" at step {step}"
        super().__init__(msg)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "id", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this (non-leaf) tensor after backward."""
        self._retain = True
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scale(self, -1.0)


@contextlib.contextmanager
def no_grad():
    """Ops inside this block record no graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check(arr: np.ndarray, op: str, where: str = "forward") -> None:
    if not np.isfinite(arr).all():
        raise NumericError(op, where)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, back: Callable) -> Tensor:
    _check(data, op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = back
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen.add(t.id)
        nodes.append(t)
        stack.extend(t._parents)
    # ids grow with construction, so descending id is reverse construction order
    nodes.sort(key=lambda t: t.id, reverse=True)
    return nodes


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf reached.

    Gradients add onto any existing ``.grad``; callers reset between steps.
    """
    if loss.data.size != 1 and grad is None:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    pending: dict[int, np.ndarray] = {loss.id: seed}
    for node in _topo(loss):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node.is_leaf:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check(pg, node.op, "backward")
            prev = pending.get(parent.id)
            pending[parent.id] = pg if prev is None else prev + pg


# ---------------------------------------------------------- elementwise ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _node(x.data * c, (x,), "scale", lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.maximum(x.data, 0), (x,), "relu", lambda g: (g * mask,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clamp; the gradient is passed only where lo < x < hi."""
    mask = (x.data > lo) & (x.data < hi)
    return _node(np.clip(x.data, lo, hi), (x,), "clip", lambda g: (g * mask,))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; contributes nothing to the gradient of ``x``."""
    out = Tensor(x.data)
    out.op = "stop_gradient"
    return out


# ---------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose",
                 lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), "concat",
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def gather_locations(x: Tensor, index: np.ndarray, out_hw: tuple[int, int]) -> Tensor:
    """Pick spatial vectors: out[b, :, p] = x[b, :, index[b, p]] (flattened positions)."""
    B, C, H, W = x.shape
    flat = x.data.reshape(B, C, H * W)
    idx = np.asarray(index)
    picked = np.take_along_axis(flat, idx[:, None, :], axis=2)

    def back(g):
        gx = np.zeros((B, C, H * W), dtype=g.dtype)
        gg = g.reshape(B, C, -1)
        for b in range(B):
            np.add.at(gx[b], (slice(None), idx[b]), gg[b])
        return (gx.reshape(B, C, H, W),)

    return _node(picked.reshape(B, C, *out_hw), (x,), "gather", back)


# ---------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype),
                 (x,), "sum", back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), "matmul", back)


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            Ho: int, Wo: int) -> np.ndarray:
    """Rows of (kh, kw, C)-ordered patches, built channels-last so copies stay contiguous."""
    B, C, H, W = xd.shape
    xn = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=xd.dtype)
    xn[:, pad:pad + H, pad:pad + W] = xd.transpose(0, 2, 3, 1)
    win = sliding_window_view(xn, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw], plus bias."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {weight.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    B, C, H, W = x.shape
    Co, _, kh, kw = weight.shape
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"conv2d kernel {weight.shape} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({Co},)")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xd = x.data
    # kernel flattened in (kh, kw, Cin) order to match the patch rows
    wm = weight.data.transpose(0, 2, 3, 1).reshape(Co, -1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0

    def cols():
        if pointwise:
            return xd.transpose(0, 2, 3, 1).reshape(-1, C)
        return _im2col(xd, kh, kw, stride, pad, Ho, Wo)

    out = cols() @ wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (gm.T @ cols()).reshape(Co, kh, kw, C).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0) if bias is not None else None
        if not x.requires_grad:
            return None, np.ascontiguousarray(gw), gb
        dcols = (gm @ wm).reshape(B, Ho, Wo, kh, kw, C)
        if pointwise:
            gx = dcols.reshape(B, H, W, C)
        else:
            gxn = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxn[:, i:i + stride * (Ho - 1) + 1:stride,
                        j:j + stride * (Wo - 1) + 1:stride] += dcols[:, :, :, i, j]
            gx = gxn[:, pad:pad + H, pad:pad + W]
        return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), np.ascontiguousarray(gw), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, "conv2d", back)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Windowed average pooling without padding."""
    stride = stride or kernel
    B, C, H, W = x.shape
    if kernel > H or kernel > W:
        raise ShapeError(f"pool kernel {kernel} larger than input {x.shape}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win[:, :, :Ho, :Wo].mean(axis=(-2, -1))

    def back(g):
        gx = np.zeros_like(x.data)
        share = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * (Ho - 1) + 1:stride,
                   j:j + stride * (Wo - 1) + 1:stride] += share
        return (gx,)

    return _node(out.astype(x.dtype, copy=False), (x,), "avg_pool2d", back)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C] spatial mean."""
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------- normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5,
               update_stats: bool = True) -> Tensor:
    """Per-channel normalization over batch (and spatial) axes.

    ``momentum`` weights the old running value: r <- m*r + (1-m)*batch.
    Running statistics are mutated in place when training and update_stats.
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    xd = x.data
    if training:
        if xd.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs batch size >= 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            n = xd.size // xd.shape[1]
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape).astype(xd.dtype)) * inv.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def back(gout):
        ggamma = (gout * xhat).sum(axis=axes)
        gbeta = gout.sum(axis=axes)
        gxhat = gout * g_
        if training:
            m = xd.size // xd.shape[1]
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _node(out.astype(xd.dtype, copy=False), (x, gamma, beta), "batch_norm", back)


def l2_normalize(v: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """Divide each vector along ``axis`` by max(norm, eps)."""
    vd = v.data
    norm = np.sqrt((vd * vd).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps).astype(vd.dtype)
    out = vd / denom
    active = norm > eps

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - out * dot) / denom, g / denom),)

    return _node(out, (v,), "l2_normalize", back)


def cosine_similarity_map(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """[B,C,H,W] x [B,C,H',W'] -> [B, H*W, H'*W'] pairwise cosine similarities."""
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"cosine map needs equal batch/channel extents: {a.shape} vs {b.shape}")
    B, C = a.shape[:2]
    an = reshape(l2_normalize(a, eps, axis=1), (B, C, -1))
    bn = reshape(l2_normalize(b, eps, axis=1), (B, C, -1))
    return matmul(transpose(an, (0, 2, 1)), bn)


def parameters_finite(ts: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in ts)
