"""Central-difference gradient verification for tape primitives and models."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

__all__ = ["relative_error", "check_function", "check_parameters"]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``||a - n|| / max(||a||, ||n||)`` (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)))
    return float(np.linalg.norm(a - n) / denom) if denom > 0 else 0.0


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-2,
                   seed: int = 0) -> float:
    """Worst relative error of ``d<fn(*inputs), R>/d inputs`` over all inputs.

    ``R`` is a fixed random cotangent, so vector-valued ``fn`` reduces to a scalar.
    Arrays are wrapped in the current compute dtype.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(x, dtype=gc.get_dtype()) for x in inputs]
    probe = None

    def scalar(arrs, record):
        nonlocal probe
        ts = [Tensor(a, requires_grad=record) for a in arrs]
        out = fn(*ts)
        if probe is None:
            probe = rng.uniform(-1.0, 1.0, size=out.shape).astype(out.data.dtype)
        return ts, out

    def reduce64(out):
        # Reduce in float64 so the difference quotient is not dominated by summation rounding.
        return float(np.sum(out.data.astype(np.float64) * probe.astype(np.float64)))

    ts, out = scalar(arrays, True)
    gc.backward(gc.sum(gc.mul(out, Tensor(probe))))
    worst = 0.0
    for i, t in enumerate(ts):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros(arrays[i].shape)
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            with gc.no_grad():
                fp = reduce64(scalar(arrays, False)[1])
            flat[j] = old - step
            with gc.no_grad():
                fm = reduce64(scalar(arrays, False)[1])
            flat[j] = old
            numeric.reshape(-1)[j] = (fp - fm) / (2.0 * step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_parameters(loss_fn: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
                     count: int = 20, step: float = 1e-2, seed: int = 0) -> tuple[float, list]:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``count`` scalar entries are drawn at random across ``params``. Returns the
    worst relative error and per-entry ``(name, index, analytic, numeric)`` tuples.
    """
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.grad = None
    gc.backward(loss_fn())
    sizes = np.array([p.size for _, p in params])
    picks = rng.choice(int(sizes.sum()), size=count, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    records = []
    for flat_idx in sorted(picks):
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name, p = params[k]
        j = int(flat_idx - offsets[k])
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[j])
        flat = p.data.reshape(-1)
        old = flat[j]
        with gc.no_grad():
            flat[j] = old + step
            fp = float(loss_fn().data)
            flat[j] = old - step
            fm = float(loss_fn().data)
        flat[j] = old
        records.append((name, j, analytic, (fp - fm) / (2.0 * step)))
    a = np.array([r[2] for r in records])
    n = np.array([r[3] for r in records])
    return relative_error(a, n), records
