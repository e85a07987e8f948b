"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Every differentiable primitive applied
to a tensor that requires gradients appends a node to the current thread's
tape. :func:`backward` walks the tape in reverse recording order, accumulates
gradients into leaf tensors with ``+=`` semantics, and clears the tape.

Compute precision is float32 by default; :func:`precision` switches to float64
for tight gradient verification.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "backward",
    "no_grad",
    "precision",
    "get_dtype",
    "add",
    "sub",
    "mul",
    "scale",
    "add_constant",
    "matmul",
    "linear",
    "reshape",
    "permute",
    "concat",
    "take",
    "sum",
    "mean",
    "mse",
    "gelu",
    "softmax",
    "layer_norm",
    "conv2d",
    "patch_conv",
    "patch_conv_transpose",
    "window_partition",
    "window_reverse",
    "roll2d",
    "pad_reflect",
    "crop2d",
    "linear_map",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: list[_Node] = []
        self.recording = True
        self.dtype = np.dtype(np.float32)


_state = _State()


def get_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the compute dtype (``"float32"`` or ``"float64"``)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    old = _state.dtype
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = old


class _Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tensor:
    """Dense real tensor that can participate in the gradient tape.

    Args:
        data: Array-like payload, cast to the current compute dtype.
        requires_grad: Whether gradients should be accumulated into ``grad``.
        name: Optional label, used for parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_state.dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._leaf = True
    out.requires_grad = False
    if _state.recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        _state.tape.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar ``loss`` into every requires-grad leaf.

    Leaf gradients accumulate (``+=``); callers zero them between steps. The
    tape is cleared afterwards, so each recorded graph supports one backward.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    try:
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(tape):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True) if inp._leaf else gi
                else:
                    inp.grad = inp.grad + gi
            if not node.out._leaf:
                node.out.grad = None
    finally:
        for node in tape:
            if not node.out._leaf:
                node.out.grad = None
        tape.clear()


def clear_tape() -> None:
    _state.tape.clear()


# --------------------------------------------------------------------------
# elementwise


def _check_leading_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.shape != big.shape[big.ndim - small.ndim:]:
        raise ShapeError(
            f"shapes {a.shape} and {b.shape} differ beyond leading batch dimensions"
        )


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def add_constant(a: Tensor, c: np.ndarray) -> Tensor:
    """``a + c`` for a non-differentiable array ``c`` broadcast onto ``a``'s shape."""
    out = a.data + c.astype(a.data.dtype, copy=False)
    if out.shape != a.shape:
        raise ShapeError(f"constant of shape {c.shape} would change shape {a.shape}")
    return _record(out, (a,), lambda g: (g,))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., M, K] @ b[..., K, N]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        if ga is not None and ga.shape != ad.shape:
            ga = _unbroadcast(ga, ad.shape)
        if gb is not None and gb.shape != bd.shape:
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``weight`` is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[0],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, inputs, bw)


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(xs), bw)


def take(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis``; the backward pass scatter-adds repeated indices."""
    index = np.asarray(index)
    axis = axis % x.ndim
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        sl = (slice(None),) * axis + (index,)
        np.add.at(gx, sl, g)
        return (gx,)

    return _record(np.take(x.data, index, axis=axis), (x,), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _record(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _record(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, shape),))


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a tensor or constant array."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.data.dtype)
    inputs = (pred, target) if isinstance(target, Tensor) else (pred,)

    def bw(g):
        gp = (2.0 / n) * g * diff
        return (gp, -gp) if len(inputs) == 2 else (gp,)

    return _record(out, inputs, bw)


# --------------------------------------------------------------------------
# activations and normalization

_SQRT_HALF = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _record(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply the affine."""
    xd = x.data
    d = xd.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs D={d}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


# --------------------------------------------------------------------------
# convolutions (NCHW)


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    # xp: [B, C, H+k-1, W+k-1] -> [B*H*W, C*k*k]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    b, c, h, w = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * k * k)


def _conv_same(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = w.shape[-1]
    p = (k - 1) // 2
    b, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, k)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(b, h, wd, -1).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding; ``k`` must be odd."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape}, {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {weight.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    wd = weight.data
    out, cols = _conv_same(x.data, wd)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv_same(g, wflip)
            gx = np.ascontiguousarray(gx)
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(wd.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, inputs, bw)


def patch_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Strided convolution with kernel = stride = p, NCHW in, NHWC out.

    ``weight`` is ``[C_out, C_in, p, p]``; H and W must be divisible by p.
    """
    b, c, h, w = x.shape
    cout, cin, p, _ = weight.shape
    if cin != c or h % p or w % p:
        raise ShapeError(f"patch_conv: input {x.shape} incompatible with weight {weight.shape}")
    hp, wp = h // p, w // p
    cols = x.data.reshape(b, c, hp, p, wp, p).transpose(0, 2, 4, 1, 3, 5).reshape(-1, c * p * p)
    wd = weight.data.reshape(cout, -1)
    out = (cols @ wd.T + bias.data).reshape(b, hp, wp, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ wd).reshape(b, hp, wp, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, c, h, w)
        return np.ascontiguousarray(gx), (g2.T @ cols).reshape(weight.shape), g2.sum(axis=0)

    return _record(out, (x, weight, bias), bw)


def patch_conv_transpose(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Transposed convolution with kernel = stride = p, NHWC in, NCHW out.

    ``weight`` is ``[C_in, C_out, p, p]``.
    """
    b, hp, wp, c = x.shape
    cin, cout, p, _ = weight.shape
    if cin != c:
        raise ShapeError(f"patch_conv_transpose: input {x.shape} vs weight {weight.shape}")
    x2 = x.data.reshape(-1, c)
    wd = weight.data.reshape(cin, -1)
    y = (x2 @ wd).reshape(b, hp, wp, cout, p, p).transpose(0, 3, 1, 4, 2, 5)
    out = y.reshape(b, cout, hp * p, wp * p) + bias.data[:, None, None]

    def bw(g):
        gy = g.reshape(b, cout, hp, p, wp, p).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * p * p)
        gx = (gy @ wd.T).reshape(x.shape)
        gw = (x2.T @ gy).reshape(weight.shape)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record(np.ascontiguousarray(out), (x, weight, bias), bw)


# --------------------------------------------------------------------------
# windowing (NHWC)


def window_partition(x: Tensor, w: int) -> Tensor:
    """``[B, H, W, C]`` -> ``[B * H/w * W/w, w*w, C]``."""
    b, h, wd, c = x.shape
    if h % w or wd % w:
        raise ShapeError(f"window_partition: {h}x{wd} not divisible by window {w}; pad first")
    y = x.data.reshape(b, h // w, w, wd // w, w, c).transpose(0, 1, 3, 2, 4, 5)
    out = np.ascontiguousarray(y).reshape(-1, w * w, c)

    def bw(g):
        gx = g.reshape(b, h // w, wd // w, w, w, c).transpose(0, 1, 3, 2, 4, 5)
        return (np.ascontiguousarray(gx).reshape(b, h, wd, c),)

    return _record(out, (x,), bw)


def window_reverse(windows: Tensor, w: int, h: int, wd: int) -> Tensor:
    """Inverse of :func:`window_partition` for a ``h x wd`` feature map."""
    n, ww, c = windows.shape
    if ww != w * w or h % w or wd % w or n % ((h // w) * (wd // w)):
        raise ShapeError(f"window_reverse: {windows.shape} incompatible with {h}x{wd}, w={w}")
    b = n // ((h // w) * (wd // w))
    y = windows.data.reshape(b, h // w, wd // w, w, w, c).transpose(0, 1, 3, 2, 4, 5)
    out = np.ascontiguousarray(y).reshape(b, h, wd, c)

    def bw(g):
        gw = g.reshape(b, h // w, w, wd // w, w, c).transpose(0, 1, 3, 2, 4, 5)
        return (np.ascontiguousarray(gw).reshape(n, ww, c),)

    return _record(out, (windows,), bw)


def roll2d(x: Tensor, shift_h: int, shift_w: int) -> Tensor:
    """Cyclic shift over axes 1 and 2 of an NHWC tensor."""
    out = np.roll(x.data, (shift_h, shift_w), axis=(1, 2))
    return _record(out, (x,), lambda g: (np.roll(g, (-shift_h, -shift_w), axis=(1, 2)),))


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    idx = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def pad_reflect(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflection-pad the bottom/right of the last two axes of an NCHW tensor."""
    if pad_h == 0 and pad_w == 0:
        return x
    h, w = x.shape[-2:]
    ih = _reflect_index(h, 0, pad_h)
    iw = _reflect_index(w, 0, pad_w)
    return take(take(x, ih, axis=-2), iw, axis=-1)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` block of the last two axes."""
    shape = x.shape
    if shape[-2:] == (h, w):
        return x

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., :h, :w] = g
        return (gx,)

    return _record(np.ascontiguousarray(x.data[..., :h, :w]), (x,), bw)


def linear_map(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a fixed linear operator; the backward pass applies its adjoint."""
    out = np.asarray(forward(x.data), dtype=x.data.dtype)
    return _record(out, (x,), lambda g: (np.asarray(adjoint(g), dtype=g.dtype),))
