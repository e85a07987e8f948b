"""The dual-domain reconstruction network and its loss.

Three stages:

* sinogram restoration (SRT): ``Y~ = Y + unembed(conv(F_m) + F_0)`` where
  ``F_0 = embed(Y)`` and ``F_i`` are shifted-window residual blocks;
* consistency layer: ``X2 = fbp(Y~)``, differentiable through ``fbp_adjoint``;
* residual image reconstruction (RIRM): ``X = M_re(F_n) + X1`` with
  ``F_0 = embed([X1, X2])`` and ``X1 = fbp(Y)``.

All residual exits start at zero, so a fresh model maps ``Y`` to ``fbp(Y)``.
The ``imgtrans`` variant drops SRT and the consistency branch and refines ``X1``
alone.
"""

from __future__ import annotations

import dataclasses
from typing import Any

import numpy as np

from . import formats, tomo
from . import gradcore as gc
from .gradcore import Tensor
from .swin import Conv2d, Module, PatchEmbed, PatchUnembed, ResidualBlock, StmConfig
from .tomo import ScanGeometry

__all__ = [
    "SrtConfig",
    "RirmConfig",
    "ModelConfig",
    "SinogramRestoration",
    "ImageReconstruction",
    "DuDoTransModel",
    "VARIANTS",
    "fbp_batch",
    "consistency_layer",
    "total_loss",
    "count_parameters",
    "stm_parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("dudotrans", "imgtrans")


@dataclasses.dataclass(frozen=True)
class SrtConfig:
    depth: int = 3
    width: int = 1
    patch_size: int = 1
    stm: StmConfig = StmConfig()

    def __post_init__(self):
        if self.depth < 0 or self.width < 1 or self.patch_size < 1:
            raise ValueError("SRT needs depth >= 0, width >= 1, patch_size >= 1")


@dataclasses.dataclass(frozen=True)
class RirmConfig:
    depth: int = 2
    width: int = 4
    patch_size: int = 2
    stm: StmConfig = StmConfig()

    def __post_init__(self):
        if self.depth < 0 or self.width < 1 or self.patch_size < 1:
            raise ValueError("RIRM needs depth >= 0, width >= 1, patch_size >= 1")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    geometry: ScanGeometry
    variant: str = "dudotrans"
    srt: SrtConfig = SrtConfig()
    rirm: RirmConfig = RirmConfig()
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 0
    zero_init: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "variant": self.variant,
            "srt": dataclasses.asdict(self.srt),
            "rirm": dataclasses.asdict(self.rirm),
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "seed": self.seed,
            "zero_init": self.zero_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        def branch(kind, sub):
            sub = dict(sub)
            sub["stm"] = StmConfig(**sub.get("stm", {}))
            return kind(**sub)

        return cls(
            geometry=ScanGeometry.from_dict(d["geometry"]),
            variant=d.get("variant", "dudotrans"),
            srt=branch(SrtConfig, d.get("srt", {})),
            rirm=branch(RirmConfig, d.get("rirm", {})),
            lambda1=float(d.get("lambda1", 1.0)),
            lambda2=float(d.get("lambda2", 1.0)),
            seed=int(d.get("seed", 0)),
            zero_init=bool(d.get("zero_init", True)),
        )


def _pad_amount(n: int, mult: int) -> int:
    return (-n) % mult


class _Branch(Module):
    """Shared embed -> residual blocks -> conv -> unembed skeleton."""

    def _build(self, c_in: int, depth: int, width: int, patch: int, stm: StmConfig,
               rng: np.random.Generator, zero: bool) -> None:
        self.embed = PatchEmbed(c_in, stm.embed_dim, patch, rng)
        self.blocks = [ResidualBlock(stm, width, rng, first_shift_index=i * width, zero_exit=zero)
                       for i in range(depth)]
        self.conv = Conv2d(stm.embed_dim, stm.embed_dim, 3, rng)
        self.unembed = PatchUnembed(stm.embed_dim, 1, patch, rng, zero=zero)
        self._mult = patch * stm.window_size

    def _pad(self, x: Tensor) -> tuple[Tensor, int, int]:
        h, w = x.shape[-2:]
        return gc.pad_reflect(x, _pad_amount(h, self._mult), _pad_amount(w, self._mult)), h, w

    def _conv_nhwc(self, f: Tensor) -> Tensor:
        return self.conv(f.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


class SinogramRestoration(_Branch):
    def __init__(self, cfg: SrtConfig, rng: np.random.Generator, zero: bool = True):
        self.cfg = cfg
        self._build(1, cfg.depth, cfg.width, cfg.patch_size, cfg.stm, rng, zero)

    def __call__(self, y: Tensor) -> Tensor:
        yp, h, w = self._pad(y)
        f0 = self.embed(yp)
        f = f0
        for blk in self.blocks:
            f = blk(f)
        out = self.unembed(self._conv_nhwc(f) + f0)
        return y + gc.crop2d(out, h, w)


class ImageReconstruction(_Branch):
    def __init__(self, cfg: RirmConfig, c_in: int, rng: np.random.Generator, zero: bool = True):
        self.cfg = cfg
        self._build(c_in, cfg.depth, cfg.width, cfg.patch_size, cfg.stm, rng, zero)

    def __call__(self, x1: Tensor, x2: Tensor | None = None) -> Tensor:
        if x2 is not None and x1.shape != x2.shape:
            raise gc.ShapeError(f"image estimates differ in shape: {x1.shape} vs {x2.shape}")
        x = x1 if x2 is None else gc.concat([x1, x2], axis=1)
        xp, h, w = self._pad(x)
        f = self.embed(xp)
        for blk in self.blocks:
            f = blk(f)
        return gc.crop2d(self.unembed(self._conv_nhwc(f)), h, w) + x1


def fbp_batch(y: np.ndarray, geom: ScanGeometry) -> np.ndarray:
    """FBP over a ``[B, 1, views, detectors]`` array."""
    return np.stack([tomo.fbp(item[0], geom)[None] for item in y])


def fbp_adjoint_batch(g: np.ndarray, geom: ScanGeometry) -> np.ndarray:
    return np.stack([tomo.fbp_adjoint(item[0], geom)[None] for item in g])


def consistency_layer(y: Tensor, geom: ScanGeometry) -> Tensor:
    """Differentiable FBP: forward is ``fbp``, backward applies ``fbp_adjoint``."""
    if y.shape[1:] != (1,) + geom.sinogram_shape:
        raise gc.ShapeError(f"sinogram batch {y.shape} does not match geometry {geom.sinogram_shape}")
    return gc.linear_map(y, lambda a: fbp_batch(a, geom), lambda g: fbp_adjoint_batch(g, geom))


class DuDoTransModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 7177])))
        if cfg.variant == "dudotrans":
            self.srt = SinogramRestoration(cfg.srt, rng, cfg.zero_init)
            self.rirm = ImageReconstruction(cfg.rirm, 2, rng, cfg.zero_init)
        else:
            self.srt = None
            self.rirm = ImageReconstruction(cfg.rirm, 1, rng, cfg.zero_init)

    @property
    def geometry(self) -> ScanGeometry:
        return self.cfg.geometry

    def _as_batch(self, y) -> Tensor:
        data = y.data if isinstance(y, (Tensor, tomo.Sinogram)) else np.asarray(y)
        if data.ndim == 2:
            data = data[None, None]
        if data.shape[1:] != (1,) + self.geometry.sinogram_shape:
            raise ValueError(f"sinogram shape {data.shape} does not match geometry "
                             f"{self.geometry.sinogram_shape}")
        return Tensor(data)

    def __call__(self, y_noisy) -> tuple[Tensor | None, Tensor | None, Tensor]:
        """Return ``(Y~, X2, X)``; the first two are None for ``imgtrans``."""
        y = self._as_batch(y_noisy)
        x1 = Tensor(fbp_batch(y.data, self.geometry))
        if self.srt is None:
            return None, None, self.rirm(x1)
        y_tilde = self.srt(y)
        x2 = consistency_layer(y_tilde, self.geometry)
        return y_tilde, x2, self.rirm(x1, x2)

    def reconstruct(self, y_noisy) -> np.ndarray:
        with gc.no_grad():
            _, _, x = self(y_noisy)
        return x.data[0, 0] if x.data.shape[0] == 1 else x.data[:, 0]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise ValueError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


def _as_target(t) -> np.ndarray:
    data = t.data if isinstance(t, (Tensor, tomo.Sinogram, tomo.CtImage)) else np.asarray(t)
    return data[None, None] if data.ndim == 2 else data


def total_loss(y_tilde: Tensor | None, x2: Tensor | None, x: Tensor, y_gt, x_gt,
               lambda1: float = 1.0, lambda2: float = 1.0) -> tuple[Tensor, dict[str, float]]:
    """``L = L_srt + lambda1 * L_dc + lambda2 * L_rirm``, each a mean squared error.

    Sinogram terms are omitted when ``y_tilde``/``x2`` are None (image-only model).
    Returns the scalar loss tensor and the float value of every term.
    """
    xg = _as_target(x_gt)
    parts: dict[str, float] = {}
    l_rirm = gc.mse(x, xg)
    parts["loss_rirm"] = float(l_rirm.data)
    loss = gc.scale(l_rirm, lambda2)
    if y_tilde is not None:
        l_srt = gc.mse(y_tilde, _as_target(y_gt))
        l_dc = gc.mse(x2, xg)
        parts["loss_srt"] = float(l_srt.data)
        parts["loss_dc"] = float(l_dc.data)
        loss = l_srt + gc.scale(l_dc, lambda1) + loss
    else:
        parts["loss_srt"] = 0.0
        parts["loss_dc"] = 0.0
    parts["loss"] = float(loss.data)
    return loss, parts


def count_parameters(model: Module) -> int:
    return model.num_parameters()


def stm_parameter_count(cfg: StmConfig) -> int:
    """Closed-form trainable scalar count of one transformer module."""
    c, hid, w = cfg.embed_dim, cfg.hidden_dim, cfg.window_size
    norms = 2 * 2 * c
    attn = (3 * c * c + 3 * c) + (c * c + c) + (2 * w - 1) ** 2 * cfg.num_heads
    mlp = (c * hid + hid) + (hid * c + c)
    return norms + attn + mlp


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: DuDoTransModel, optimizer: Any = None, extra: dict | None = None) -> None:
    """Write model config, parameters and (optionally) Adam state as DDTC."""
    config: dict = {"model": model.cfg.to_dict()}
    tensors = dict(model.state_dict())
    if optimizer is not None:
        config["adam"] = optimizer.hyperparameters()
        for name, (m, v) in optimizer.moments(model).items():
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = v
    if extra:
        config["extra"] = extra
    formats.write_ddtc(path, config, tensors)


def load_checkpoint(path) -> tuple[DuDoTransModel, dict, dict]:
    """Return ``(model, adam_config_or_empty, adam_moments)``.

    ``adam_moments`` maps parameter name to ``(m, v)`` arrays.
    """
    config, tensors = formats.read_ddtc(path)
    if "model" not in config:
        raise formats.FormatError(f"{path}: checkpoint has no model config")
    try:
        model = DuDoTransModel(ModelConfig.from_dict(config["model"]))
    except (TypeError, ValueError, KeyError) as exc:
        raise formats.FormatError(f"{path}: invalid model config ({exc})") from exc
    state = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    model.load_state_dict(state)
    moments = {}
    for name in state:
        if f"adam.m.{name}" in tensors:
            moments[name] = (tensors[f"adam.m.{name}"], tensors[f"adam.v.{name}"])
    return model, config.get("adam", {}), moments
