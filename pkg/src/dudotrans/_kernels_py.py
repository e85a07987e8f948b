"""Pure numpy reference kernels.

Same signatures and conventions as the compiled ``_kernels_c`` extension; used
when the extension is not built or ``DUDOTRANS_PURE_PYTHON=1`` is set.

Image convention: pixel ``(r, c)`` has centre
``x = (c - (W-1)/2) * pixel``, ``y = ((H-1)/2 - r) * pixel``; values outside the
grid are zero. All kernels take and return float64 arrays.
"""

from __future__ import annotations

import numpy as np


def _bilinear(image: np.ndarray, fr: np.ndarray, fc: np.ndarray) -> np.ndarray:
    h, w = image.shape
    r0 = np.floor(fr)
    c0 = np.floor(fc)
    dr = fr - r0
    dc = fc - c0
    r0 = r0.astype(np.intp)
    c0 = c0.astype(np.intp)
    out = np.zeros(fr.shape)
    for ro, wr in ((0, 1.0 - dr), (1, dr)):
        rr = r0 + ro
        okr = (rr >= 0) & (rr < h)
        for co, wc in ((0, 1.0 - dc), (1, dc)):
            cc = c0 + co
            ok = okr & (cc >= 0) & (cc < w)
            vals = image[np.where(ok, rr, 0), np.where(ok, cc, 0)]
            out += np.where(ok, wr * wc * vals, 0.0)
    return out


def fan_project(image, betas, gammas, radius, pixel, step, nsamp):
    """Line integrals along fan rays by equidistant bilinear sampling.

    Source at ``radius * (-sin b, cos b)``; ray direction
    ``(sin(b + g), -cos(b + g))``. Samples are centred on the ray's closest
    approach to the origin, ``nsamp`` of them, ``step`` apart.
    """
    image = np.ascontiguousarray(image, dtype=np.float64)
    h, w = image.shape
    nv, nd = len(betas), len(gammas)
    out = np.empty((nv, nd))
    k = (np.arange(nsamp) - 0.5 * (nsamp - 1)) * step
    for v, b in enumerate(betas):
        sx, sy = -radius * np.sin(b), radius * np.cos(b)
        dx = np.sin(b + gammas)
        dy = -np.cos(b + gammas)
        tc = -(sx * dx + sy * dy)
        t = tc[:, None] + k[None, :]
        px = sx + t * dx[:, None]
        py = sy + t * dy[:, None]
        fc = px / pixel + 0.5 * (w - 1)
        fr = 0.5 * (h - 1) - py / pixel
        out[v] = _bilinear(image, fr, fc).sum(axis=1) * step
    return out


def _detector_coords(h, w, pixel, cos_t, sin_t, s0, ds):
    xs = (np.arange(w) - 0.5 * (w - 1)) * pixel
    ys = (0.5 * (h - 1) - np.arange(h)) * pixel
    u = ((xs[None, :] * cos_t + ys[:, None] * sin_t) - s0) / ds
    i0 = np.floor(u)
    return i0.astype(np.intp), u - i0


def backproject(sino, cos_t, sin_t, s0, ds, h, w, pixel):
    """Unweighted pixel-driven backprojection with linear detector interpolation.

    Detector bin ``j`` sits at ``s0 + j * ds``; samples beyond the detector are zero.
    """
    sino = np.ascontiguousarray(sino, dtype=np.float64)
    na, ns = sino.shape
    out = np.zeros((h, w))
    for a in range(na):
        i0, f = _detector_coords(h, w, pixel, cos_t[a], sin_t[a], s0, ds)
        row = sino[a]
        for off, wt in ((0, 1.0 - f), (1, f)):
            idx = i0 + off
            ok = (idx >= 0) & (idx < ns)
            out += np.where(ok, wt * row[np.where(ok, idx, 0)], 0.0)
    return out


def project_parallel(image, cos_t, sin_t, s0, ds, ns, pixel):
    """Exact transpose of :func:`backproject` (pixel-driven parallel projection)."""
    image = np.ascontiguousarray(image, dtype=np.float64)
    h, w = image.shape
    na = len(cos_t)
    out = np.zeros((na, ns))
    flat = image.ravel()
    for a in range(na):
        i0, f = _detector_coords(h, w, pixel, cos_t[a], sin_t[a], s0, ds)
        i0 = i0.ravel()
        f = f.ravel()
        for off, wt in ((0, 1.0 - f), (1, f)):
            idx = i0 + off
            ok = (idx >= 0) & (idx < ns)
            out[a] += np.bincount(idx[ok], weights=(wt * flat)[ok], minlength=ns)
    return out
