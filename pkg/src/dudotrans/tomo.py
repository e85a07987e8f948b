"""Fan-beam tomography operators.

Every operator here is linear in its array argument and has an explicit adjoint,
so filtered backprojection can sit inside a gradient tape:

    fbp = backproject o ramp_filter o rebin_fan_to_parallel

Geometry is dimensionless: the field of view is the unit disk, the source orbits
at ``source_to_iso`` and the detector is equiangular with half-angle
``detector_arc``. Source position for view angle ``b`` is
``R * (-sin b, cos b)``; the fan ray at angle ``g`` then belongs to the parallel
ray with normal angle ``theta = b + g`` and offset ``s = R * sin g``.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels

__all__ = [
    "ScanGeometry",
    "CtImage",
    "Sinogram",
    "PhantomSpec",
    "SHEPP_LOGAN",
    "forward_project",
    "rebin_fan_to_parallel",
    "rebin_adjoint",
    "ramp_filter",
    "backproject",
    "project_parallel",
    "fbp",
    "fbp_adjoint",
    "rasterize_phantom",
]

DEFAULT_ARC = math.asin(1.0 / 3.0)


@dataclasses.dataclass(frozen=True)
class ScanGeometry:
    """Fan-beam acquisition plus image grid.

    ``pixel_spacing`` defaults to ``2 / max(image_size)`` so the grid spans the
    unit field of view. After rebinning the parallel grid has ``num_views``
    angles over ``[0, pi)`` and ``num_detectors`` offsets over ``[-1, 1]``.
    """

    num_views: int
    num_detectors: int = 256
    source_to_iso: float = 3.0
    source_to_detector: float = 5.0
    detector_arc: float = DEFAULT_ARC
    image_size: tuple[int, int] = (128, 128)
    pixel_spacing: float | None = None
    hann: bool = False

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(n) for n in self.image_size))
        if self.pixel_spacing is None:
            object.__setattr__(self, "pixel_spacing", 2.0 / max(self.image_size))
        if self.num_views < 1 or self.num_detectors < 1:
            raise ValueError("num_views and num_detectors must be positive")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ValueError(f"bad image_size {self.image_size}")
        if not self.source_to_detector > self.source_to_iso > 1.0:
            raise ValueError("need source_to_detector > source_to_iso > 1")
        if math.sin(self.detector_arc) < 1.0 / self.source_to_iso - 1e-12:
            raise ValueError("detector fan does not cover the unit field of view")
        if self.detector_arc >= math.pi / 2:
            raise ValueError("detector_arc must be below pi/2")
        if self.pixel_spacing <= 0:
            raise ValueError("pixel_spacing must be positive")

    @property
    def view_angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.num_views) / self.num_views

    @property
    def detector_spacing(self) -> float:
        return 2.0 * self.detector_arc / self.num_detectors

    @property
    def detector_angles(self) -> np.ndarray:
        return -self.detector_arc + (np.arange(self.num_detectors) + 0.5) * self.detector_spacing

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.num_views, self.num_detectors)

    @property
    def parallel_shape(self) -> tuple[int, int]:
        return (self.num_views, self.num_detectors)

    @property
    def parallel_angles(self) -> np.ndarray:
        return np.pi * np.arange(self.num_views) / self.num_views

    @property
    def offset_spacing(self) -> float:
        return 2.0 / self.num_detectors

    @property
    def offsets(self) -> np.ndarray:
        return -1.0 + (np.arange(self.num_detectors) + 0.5) * self.offset_spacing

    def replace(self, **changes) -> "ScanGeometry":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        d = dict(d)
        d.pop("view_angles", None)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what} contains non-finite entries")


@dataclasses.dataclass(frozen=True)
class CtImage:
    data: np.ndarray
    geometry: ScanGeometry

    def __post_init__(self):
        if self.data.shape != self.geometry.image_size:
            raise ValueError(f"image shape {self.data.shape} != {self.geometry.image_size}")
        _check_finite(self.data, "image")


@dataclasses.dataclass(frozen=True)
class Sinogram:
    data: np.ndarray
    geometry: ScanGeometry
    kind: str = "fan"

    def __post_init__(self):
        if self.kind not in ("fan", "parallel"):
            raise ValueError(f"unknown sinogram kind {self.kind!r}")
        want = self.geometry.sinogram_shape if self.kind == "fan" else self.geometry.parallel_shape
        if self.data.shape != want:
            raise ValueError(f"{self.kind} sinogram shape {self.data.shape} != {want}")
        _check_finite(self.data, "sinogram")


def _array(x, shape: tuple[int, int], what: str) -> np.ndarray:
    data = x.data if isinstance(x, (CtImage, Sinogram)) else np.asarray(x)
    if data.shape != tuple(shape):
        raise ValueError(f"{what} has shape {data.shape}, geometry expects {tuple(shape)}")
    return data


# --------------------------------------------------------------------------
# forward projection


def forward_project(image, geom: ScanGeometry, oversample: int = 1) -> Sinogram:
    """Fan-beam line integrals of ``image`` for every (view, detector) pair.

    Rays are sampled every ``pixel_spacing / (2 * oversample)`` with bilinear
    image interpolation.
    """
    data = _array(image, geom.image_size, "image")
    h, w = geom.image_size
    step = geom.pixel_spacing / (2.0 * oversample)
    reach = geom.pixel_spacing * math.hypot(0.5 * (h + 1), 0.5 * (w + 1))
    nsamp = int(math.ceil(2.0 * reach / step)) + 1
    out = kernels.fan_project(data, geom.view_angles, geom.detector_angles,
                              geom.source_to_iso, geom.pixel_spacing, step, nsamp)
    return Sinogram(out, geom, "fan")


# --------------------------------------------------------------------------
# rebinning


@functools.lru_cache(maxsize=32)
def _rebin_matrix(geom: ScanGeometry) -> sp.csr_matrix:
    nv, nd = geom.sinogram_shape
    na, ns = geom.parallel_shape
    dbeta = 2.0 * np.pi / nv
    dgam = geom.detector_spacing
    theta = geom.parallel_angles[:, None]
    s = geom.offsets[None, :]
    out_idx = np.arange(na * ns).reshape(na, ns)
    rows, cols, vals = [], [], []
    # each parallel ray is measured twice over a full orbit: (theta, s) and (theta + pi, -s)
    for th, ss in ((theta, s), (theta + np.pi, -s)):
        gam = np.arcsin(np.clip(ss / geom.source_to_iso, -1.0, 1.0))
        beta = np.mod(th - gam, 2.0 * np.pi)
        fv = beta / dbeta
        fd = (gam + geom.detector_arc) / dgam - 0.5
        v0 = np.floor(fv)
        d0 = np.floor(fd)
        wv = fv - v0
        wd = fd - d0
        v0 = v0.astype(np.intp) % nv
        d0 = d0.astype(np.intp)
        for dv, wvv in ((0, 1.0 - wv), (1, wv)):
            vv = (v0 + dv) % nv
            for dd, wdd in ((0, 1.0 - wd), (1, wd)):
                di = d0 + dd
                ok = (di >= 0) & (di < nd)
                wgt = 0.5 * wvv * wdd
                ok = np.broadcast_to(ok, wgt.shape) & (wgt != 0.0)
                rows.append(np.broadcast_to(out_idx, wgt.shape)[ok])
                cols.append((np.broadcast_to(vv, wgt.shape) * nd + np.broadcast_to(di, wgt.shape))[ok])
                vals.append(wgt[ok])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(na * ns, nv * nd),
    )
    return mat.tocsr()


@functools.lru_cache(maxsize=32)
def _rebin_matrix_t(geom: ScanGeometry) -> sp.csr_matrix:
    return _rebin_matrix(geom).T.tocsr()


def rebin_fan_to_parallel(sino, geom: ScanGeometry) -> np.ndarray:
    """Resample a fan sinogram onto the parallel grid (bilinear in view/fan angle).

    Each parallel sample is the mean of its two conjugate fan measurements;
    samples falling outside the detector read as zero.
    """
    if isinstance(sino, Sinogram) and sino.kind != "fan":
        raise ValueError("rebin_fan_to_parallel needs a fan sinogram")
    data = _array(sino, geom.sinogram_shape, "fan sinogram")
    out = _rebin_matrix(geom) @ np.asarray(data, dtype=np.float64).ravel()
    return out.reshape(geom.parallel_shape)


def rebin_adjoint(par, geom: ScanGeometry) -> np.ndarray:
    data = _array(par, geom.parallel_shape, "parallel sinogram")
    out = _rebin_matrix_t(geom) @ np.asarray(data, dtype=np.float64).ravel()
    return out.reshape(geom.sinogram_shape)


# --------------------------------------------------------------------------
# ramp filter


@functools.lru_cache(maxsize=32)
def _ramp_response(ns: int, spacing: float, hann: bool) -> tuple[int, np.ndarray]:
    npad = 1 << int(math.ceil(math.log2(max(2 * ns, 2))))
    n = np.arange(npad)
    n = np.where(n > npad // 2, n - npad, n)
    kern = np.zeros(npad)
    kern[0] = 0.25
    odd = n % 2 == 1
    kern[odd] = -1.0 / (np.pi * n[odd]) ** 2
    resp = np.real(np.fft.rfft(kern)) / spacing
    if hann:
        f = np.arange(resp.size) / npad
        resp = resp * 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    return npad, resp


def ramp_filter(sino, spacing: float, hann: bool = False) -> np.ndarray:
    """Ram-Lak filter each row (last axis) of a parallel sinogram.

    Rows are zero-padded to the next power of two >= twice their length before the
    FFT. The operator is symmetric, so it is its own adjoint.
    """
    data = np.asarray(sino.data if isinstance(sino, Sinogram) else sino, dtype=np.float64)
    ns = data.shape[-1]
    npad, resp = _ramp_response(ns, float(spacing), bool(hann))
    spec = np.fft.rfft(data, n=npad, axis=-1) * resp
    return np.fft.irfft(spec, n=npad, axis=-1)[..., :ns]


# --------------------------------------------------------------------------
# backprojection


def _trig(geom: ScanGeometry) -> tuple[np.ndarray, np.ndarray]:
    th = geom.parallel_angles
    return np.cos(th), np.sin(th)


def backproject(par, geom: ScanGeometry) -> np.ndarray:
    """``(pi / num_angles) * sum_theta p_theta(x cos theta + y sin theta)``."""
    data = _array(par, geom.parallel_shape, "parallel sinogram")
    c, s = _trig(geom)
    h, w = geom.image_size
    ds = geom.offset_spacing
    img = kernels.backproject(data, c, s, geom.offsets[0], ds, h, w, geom.pixel_spacing)
    return img * (np.pi / geom.num_views)


def project_parallel(image, geom: ScanGeometry) -> np.ndarray:
    """Pixel-driven parallel projector: exact transpose of unweighted backprojection."""
    data = _array(image, geom.image_size, "image")
    c, s = _trig(geom)
    return kernels.project_parallel(data, c, s, geom.offsets[0], geom.offset_spacing,
                                    geom.num_detectors, geom.pixel_spacing)


def fbp(sino, geom: ScanGeometry) -> np.ndarray:
    """Filtered backprojection of a fan sinogram via parallel rebinning."""
    par = rebin_fan_to_parallel(sino, geom)
    return backproject(ramp_filter(par, geom.offset_spacing, geom.hann), geom)


def fbp_adjoint(image_grad, geom: ScanGeometry) -> np.ndarray:
    """Transpose of :func:`fbp`: maps an image cotangent to a fan sinogram."""
    g = project_parallel(image_grad, geom) * (np.pi / geom.num_views)
    g = ramp_filter(g, geom.offset_spacing, geom.hann)
    return rebin_adjoint(g, geom)


# --------------------------------------------------------------------------
# phantoms


@dataclasses.dataclass(frozen=True)
class PhantomSpec:
    """Ellipses as ``(center_x, center_y, semi_a, semi_b, rotation_rad, value)``."""

    ellipses: tuple[tuple[float, float, float, float, float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ellipses", tuple(tuple(float(v) for v in e) for e in self.ellipses))
        for e in self.ellipses:
            if len(e) != 6:
                raise ValueError(f"ellipse needs 6 parameters, got {e}")
            if e[2] <= 0 or e[3] <= 0:
                raise ValueError(f"ellipse semi-axes must be positive: {e}")
            if ellipse_extent(e) > 1.0 + 1e-9:
                raise ValueError(f"ellipse {e} leaves the unit disk")

    def to_list(self) -> list[list[float]]:
        return [list(e) for e in self.ellipses]


def ellipse_extent(e: Sequence[float]) -> float:
    """Largest distance from the origin to a point of the ellipse."""
    cx, cy, a, b, phi, _ = e
    t = np.linspace(0.0, 2.0 * np.pi, 4096, endpoint=False)
    x = cx + a * np.cos(t) * np.cos(phi) - b * np.sin(t) * np.sin(phi)
    y = cy + a * np.cos(t) * np.sin(phi) + b * np.sin(t) * np.cos(phi)
    return float(np.max(np.hypot(x, y)))


def _deg(d: float) -> float:
    return math.radians(d)


# modified Shepp-Logan (higher-contrast intensities), values sum to [0, 1]
SHEPP_LOGAN = PhantomSpec((
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    (0.22, 0.0, 0.11, 0.31, _deg(-18.0), -0.2),
    (-0.22, 0.0, 0.16, 0.41, _deg(18.0), -0.2),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    (0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
))


def phantom_value(spec: PhantomSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact (unclipped) phantom value at points ``(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    val = np.zeros(np.broadcast(x, y).shape)
    for cx, cy, a, b, phi, v in spec.ellipses:
        dx, dy = x - cx, y - cy
        c, s = math.cos(phi), math.sin(phi)
        xr = dx * c + dy * s
        yr = -dx * s + dy * c
        val += np.where((xr / a) ** 2 + (yr / b) ** 2 <= 1.0, v, 0.0)
    return val


def rasterize_phantom(spec: PhantomSpec, geom: ScanGeometry) -> np.ndarray:
    """Sample ``spec`` on the image grid with 2x2 supersampling, clipped to [0, 1]."""
    h, w = geom.image_size
    ps = geom.pixel_spacing
    xs = (np.arange(w) - 0.5 * (w - 1)) * ps
    ys = (0.5 * (h - 1) - np.arange(h)) * ps
    acc = np.zeros((h, w))
    for oy in (-0.25, 0.25):
        for ox in (-0.25, 0.25):
            val = phantom_value(spec, xs[None, :] + ox * ps, ys[:, None] + oy * ps)
            acc += np.clip(val, 0.0, 1.0)
    return acc / 4.0
