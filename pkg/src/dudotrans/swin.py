"""Shifted-window transformer blocks built on :mod:`dudotrans.gradcore`.

Feature maps inside the transformer are channels-last ``[B, H, W, C]``;
convolutions run channels-first and the blocks permute around them.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterator

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

__all__ = [
    "StmConfig",
    "Module",
    "Linear",
    "LayerNorm",
    "Conv2d",
    "PatchEmbed",
    "PatchUnembed",
    "WindowAttention",
    "SwinBlock",
    "ResidualBlock",
    "shift_mask",
    "relative_position_index",
]

MASK_VALUE = -1e4


@dataclasses.dataclass(frozen=True)
class StmConfig:
    embed_dim: int = 32
    num_heads: int = 4
    window_size: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1 or self.window_size < 1:
            raise ValueError("embed_dim, num_heads and window_size must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"num_heads={self.num_heads} does not divide embed_dim={self.embed_dim}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2.0 * std, 2.0 * std)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((d_out, d_in)) if zero else _trunc_normal(rng, (d_out, d_in))
        self.weight = _param(w)
        self.bias = _param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return gc.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return gc.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    """Same-padded stride-1 convolution on NCHW tensors (uniform fan-in init)."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / math.sqrt(c_in * k * k)
        if zero:
            self.weight = _param(np.zeros((c_out, c_in, k, k)))
            self.bias = _param(np.zeros(c_out))
        else:
            self.weight = _param(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
            self.bias = _param(rng.uniform(-bound, bound, size=c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return gc.conv2d(x, self.weight, self.bias)


class PatchEmbed(Module):
    """Image space ``[B, C0, H, W]`` to patch features ``[B, H/p, W/p, C]``."""

    def __init__(self, c_in: int, dim: int, patch: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(c_in * patch * patch)
        self.weight = _param(rng.uniform(-bound, bound, size=(dim, c_in, patch, patch)))
        self.bias = _param(rng.uniform(-bound, bound, size=dim))
        self.patch = patch

    def __call__(self, x: Tensor) -> Tensor:
        return gc.patch_conv(x, self.weight, self.bias)


class PatchUnembed(Module):
    """Patch features back to image space via a stride-``p`` transposed convolution."""

    def __init__(self, dim: int, c_out: int, patch: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((dim, c_out, patch, patch))
            b = np.zeros(c_out)
        else:
            bound = 1.0 / math.sqrt(dim * patch * patch)
            w = rng.uniform(-bound, bound, size=(dim, c_out, patch, patch))
            b = rng.uniform(-bound, bound, size=c_out)
        self.weight = _param(w)
        self.bias = _param(b)
        self.patch = patch

    def __call__(self, x: Tensor) -> Tensor:
        return gc.patch_conv_transpose(x, self.weight, self.bias)


def relative_position_index(w: int) -> np.ndarray:
    """``[w*w, w*w]`` indices into a ``(2w-1)^2`` relative-offset table."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


def shift_mask(h: int, w_: int, window: int, shift: int) -> np.ndarray | None:
    """Additive ``[num_windows, N, N]`` mask for shifted windows, or None when unshifted.

    Tokens are labelled by the region they came from before the cyclic roll;
    pairs from different regions get a large negative logit.
    """
    if shift == 0:
        return None
    labels = np.zeros((h, w_))
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            labels[hs, ws] = cnt
            cnt += 1
    lw = labels.reshape(h // window, window, w_ // window, window).transpose(0, 2, 1, 3)
    lw = lw.reshape(-1, window * window)
    return np.where(lw[:, None, :] != lw[:, :, None], MASK_VALUE, 0.0)


class WindowAttention(Module):
    """Multi-head self-attention inside (optionally shifted) ``w x w`` windows."""

    def __init__(self, cfg: StmConfig, rng: np.random.Generator, zero_exit: bool = True):
        c, w = cfg.embed_dim, cfg.window_size
        self.cfg = cfg
        self.qkv = Linear(c, 3 * c, rng)
        self.proj = Linear(c, c, rng, zero=zero_exit)
        self.rel_bias = _param(_trunc_normal(rng, ((2 * w - 1) ** 2, cfg.num_heads)))
        self._rel_index = relative_position_index(w).ravel()

    def __call__(self, x: Tensor, shift: int = 0, return_weights: bool = False):
        cfg = self.cfg
        b, h, wd, c = x.shape
        w, nh = cfg.window_size, cfg.num_heads
        if c != cfg.embed_dim:
            raise gc.ShapeError(f"attention expects {cfg.embed_dim} channels, got {c}")
        if h % w or wd % w:
            raise gc.ShapeError(f"feature map {h}x{wd} not divisible by window {w}")
        if shift:
            x = gc.roll2d(x, -shift, -shift)
        xw = gc.window_partition(x, w)
        bn, n = xw.shape[0], w * w
        d = c // nh
        qkv = self.qkv(xw).reshape(bn, n, 3, nh, d).permute(2, 0, 3, 1, 4)
        q = gc.reshape(gc.take(qkv, np.array([0]), axis=0), (bn, nh, n, d))
        k = gc.reshape(gc.take(qkv, np.array([1]), axis=0), (bn, nh, n, d))
        v = gc.reshape(gc.take(qkv, np.array([2]), axis=0), (bn, nh, n, d))
        logits = gc.matmul(gc.scale(q, d ** -0.5), gc.permute(k, (0, 1, 3, 2)))
        bias = gc.take(self.rel_bias, self._rel_index, axis=0).reshape(n, n, nh).permute(2, 0, 1)
        logits = logits + bias
        mask = shift_mask(h, wd, w, shift)
        if mask is not None:
            nw = mask.shape[0]
            logits = gc.add_constant(logits.reshape(b, nw, nh, n, n), mask[None, :, None])
            logits = logits.reshape(bn, nh, n, n)
        attn = gc.softmax(logits, axis=-1)
        out = gc.matmul(attn, v).permute(0, 2, 1, 3).reshape(bn, n, c)
        out = gc.window_reverse(self.proj(out), w, h, wd)
        if shift:
            out = gc.roll2d(out, shift, shift)
        return (out, attn) if return_weights else out


class SwinBlock(Module):
    """Pre-norm shifted-window transformer module: attention then GELU MLP, both residual."""

    def __init__(self, cfg: StmConfig, shift: int, rng: np.random.Generator, zero_exit: bool = True):
        if not 0 <= shift < cfg.window_size:
            raise ValueError(f"shift {shift} must lie in [0, {cfg.window_size})")
        self.shift = shift
        self.norm1 = LayerNorm(cfg.embed_dim)
        self.attn = WindowAttention(cfg, rng, zero_exit)
        self.norm2 = LayerNorm(cfg.embed_dim)
        self.fc1 = Linear(cfg.embed_dim, cfg.hidden_dim, rng)
        self.fc2 = Linear(cfg.hidden_dim, cfg.embed_dim, rng, zero=zero_exit)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x), self.shift)
        return x + self.fc2(gc.gelu(self.fc1(self.norm2(x))))


class ResidualBlock(Module):
    """``F_out = conv(STM_n(...STM_1(F_in))) + F_in`` on NHWC features."""

    def __init__(self, cfg: StmConfig, width: int, rng: np.random.Generator,
                 first_shift_index: int = 0, zero_exit: bool = True, conv_kernel: int = 3):
        if width < 1:
            raise ValueError("a residual block needs at least one STM")
        half = cfg.window_size // 2
        self.blocks = [
            SwinBlock(cfg, half if (first_shift_index + j) % 2 else 0, rng, zero_exit)
            for j in range(width)
        ]
        self.conv = Conv2d(cfg.embed_dim, cfg.embed_dim, conv_kernel, rng, zero=zero_exit)

    def __call__(self, x: Tensor) -> Tensor:
        y = x
        for blk in self.blocks:
            y = blk(y)
        y = self.conv(y.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        return y + x
