"""Adam, the training loop and a small overfitting smoke check."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcore as gc
from . import simulate
from .model import DuDoTransModel, save_checkpoint, total_loss

__all__ = [
    "AdamState",
    "Adam",
    "adam_step",
    "TrainConfig",
    "NumericalError",
    "TrainResult",
    "train_loop",
    "overfit_smoke",
    "LOG_HEADER",
]

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "item", "loss", "loss_srt", "loss_dc", "loss_rirm")


class NumericalError(RuntimeError):
    """A loss or gradient became NaN or infinite."""


@dataclasses.dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new parameter arrays; moments update in place.

    Parameters without a gradient are left untouched.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - state.lr * update).astype(p.dtype, copy=False)
    return out


class Adam:
    """Adam bound to a model's named parameters."""

    def __init__(self, model, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if lr < 0 or eps <= 0 or not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError("invalid Adam hyperparameters")
        self.params = dict(model.named_parameters())
        self.state = AdamState.zeros_like({k: p.data for k, p in self.params.items()},
                                          lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items()}
        new = adam_step({k: p.data for k, p in self.params.items()}, grads, self.state)
        for k, p in self.params.items():
            p.data = new[k]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def hyperparameters(self) -> dict:
        s = self.state
        return {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "t": s.t}

    def moments(self, model=None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (self.state.m[k], self.state.v[k]) for k in self.params}

    def load(self, hyper: dict, moments: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        s = self.state
        s.lr, s.beta1, s.beta2 = float(hyper["lr"]), float(hyper["beta1"]), float(hyper["beta2"])
        s.eps, s.t = float(hyper["eps"]), int(hyper["t"])
        for k, (m, v) in moments.items():
            s.m[k] = np.array(m, dtype=self.params[k].data.dtype)
            s.v[k] = np.array(v, dtype=self.params[k].data.dtype)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    seed: int = 0
    manifest: str = ""
    checkpoint_interval: int = 10
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr: float = 1e-4
    strict_deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.lr < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lr and loss weights must be non-negative")


@dataclasses.dataclass
class TrainResult:
    rows: list[dict]
    checkpoints: list[Path]
    epoch_means: list[float]
    optimizer: Adam


def _deterministic(strict: bool):
    return threadpool_limits(limits=1) if strict else contextlib.nullcontext()


def _stack(items: Sequence[dict], key: str) -> np.ndarray:
    return np.stack([np.asarray(it[key])[None] for it in items])


def _check_finite(parts: dict, where: str) -> None:
    if not all(math.isfinite(v) for v in parts.values()):
        raise NumericalError(f"non-finite loss at {where}: {parts}")


def load_split(manifest_path, split: str = "train") -> list[dict]:
    manifest_path = Path(manifest_path)
    entries = simulate.load_manifest(manifest_path)
    items = []
    for idx, e in enumerate(entries):
        if e.split == split:
            item = simulate.load_entry(manifest_path.parent, e)
            item["index"] = idx
            items.append(item)
    return items


def train_step(model: DuDoTransModel, opt: Adam, batch: Sequence[dict],
               lambda1: float, lambda2: float) -> dict:
    y = _stack(batch, "noisy")
    y_tilde, x2, x = model(y)
    loss, parts = total_loss(y_tilde, x2, x, _stack(batch, "clean"), _stack(batch, "phantom"),
                             lambda1, lambda2)
    gc.backward(loss)
    opt.step()
    opt.zero_grad()
    return parts


def train_loop(model: DuDoTransModel, items: Sequence[dict], cfg: TrainConfig, out_dir,
               optimizer: Adam | None = None) -> TrainResult:
    """Train on ``items`` (dicts with ``noisy``, ``clean``, ``phantom``, ``index``).

    Item order is reshuffled every epoch from a stream seeded by
    ``(cfg.seed, epoch)``. Writes ``loss_log.csv`` and ``ckpt_epoch{N}.ddtc`` every
    ``checkpoint_interval`` epochs and after the last one.
    """
    if not items:
        raise ValueError("training split is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    opt = optimizer or Adam(model, lr=cfg.lr)
    rows: list[dict] = []
    ckpts: list[Path] = []
    means: list[float] = []
    log_path = out / "loss_log.csv"
    with _deterministic(cfg.strict_deterministic), open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, epoch])))
            order = rng.permutation(len(items))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [items[i] for i in order[start:start + cfg.batch_size]]
                label = "+".join(str(b["index"]) for b in batch)
                parts = train_step(model, opt, batch, cfg.lambda1, cfg.lambda2)
                _check_finite(parts, f"epoch {epoch}, item {label}")
                row = {"epoch": epoch, "item": label, **{k: parts[k] for k in LOG_HEADER[2:]}}
                rows.append(row)
                writer.writerow([epoch, label] + [repr(parts[k]) for k in LOG_HEADER[2:]])
                losses.append(parts["loss"])
            fh.flush()
            means.append(float(np.mean(losses)))
            log.info("epoch %d mean loss %.6g", epoch, means[-1])
            if epoch % cfg.checkpoint_interval == 0 or epoch == cfg.epochs:
                path = out / f"ckpt_epoch{epoch}.ddtc"
                save_checkpoint(path, model, opt, extra={"train": dataclasses.asdict(cfg)})
                ckpts.append(path)
    return TrainResult(rows, ckpts, means, opt)


def evaluate_loss(model: DuDoTransModel, items: Iterable[dict], lambda1: float = 1.0,
                  lambda2: float = 1.0) -> float:
    vals = []
    with gc.no_grad():
        for it in items:
            y_tilde, x2, x = model(it["noisy"])
            _, parts = total_loss(y_tilde, x2, x, it["clean"], it["phantom"], lambda1, lambda2)
            vals.append(parts["loss"])
    return float(np.mean(vals))


def overfit_smoke(model: DuDoTransModel, items: Sequence[dict], steps: int = 500,
                  lr: float = 2e-3, seed: int = 7, strict: bool = True) -> dict:
    """Fit a handful of items and compare mean total loss before and after.

    Passes when the final loss is at most a tenth of the initial one and
    everything stayed finite.
    """
    if not items:
        raise ValueError("overfit_smoke needs at least one item")
    opt = Adam(model, lr=lr)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    with _deterministic(strict):
        initial = evaluate_loss(model, items)
        history = []
        for step in range(steps):
            if step % len(items) == 0:
                order = rng.permutation(len(items))
            parts = train_step(model, opt, [items[order[step % len(items)]]], 1.0, 1.0)
            _check_finite(parts, f"smoke step {step}")
            history.append(parts["loss"])
        final = evaluate_loss(model, items)
    finite = math.isfinite(initial) and math.isfinite(final)
    return {
        "initial": initial,
        "final": final,
        "ratio": final / initial if initial > 0 else 0.0,
        "passed": finite and final <= 0.1 * initial,
        "history": history,
    }
