"""Sparse-view, noisy sinogram simulation and dataset assembly.

Randomness uses numpy's PCG64. Every noise draw for dataset entry ``i`` comes
from its own stream seeded with ``SeedSequence([seed, i])``; inside a stream the
Poisson field is drawn first and the Gaussian field second, each in row-major
(view, detector) order. Results therefore do not depend on processing order.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import formats, tomo
from .tomo import PhantomSpec, ScanGeometry, Sinogram

__all__ = [
    "NoiseConfig",
    "ManifestEntry",
    "make_sparse_geometry",
    "noise_rng",
    "add_noise",
    "jittered_phantom",
    "phantom_family",
    "build_dataset",
    "load_manifest",
    "load_entry",
]

SPARSE_VIEW_LADDER = (24, 72, 96, 144)
PHOTON_LADDER = (5e6, 1e6, 5e5, 1e5)


@dataclasses.dataclass(frozen=True)
class NoiseConfig:
    photons_i0: float = 5e6
    gauss_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.photons_i0 > 0:
            raise ValueError("photons_i0 must be positive")
        if self.gauss_fraction < 0:
            raise ValueError("gauss_fraction must be non-negative")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    phantom: str
    clean_sino: str
    noisy_sino: str
    alpha_max: int
    photons_i0: float
    gauss_fraction: float
    seed: int
    split: str


def make_sparse_geometry(base: ScanGeometry, alpha_max: int) -> ScanGeometry:
    """Copy of ``base`` with ``alpha_max`` views spread uniformly over the full orbit."""
    if int(alpha_max) != alpha_max or alpha_max < 2:
        raise ValueError(f"alpha_max must be an integer >= 2, got {alpha_max}")
    return base.replace(num_views=int(alpha_max))


POISSON_COMPONENT = 0
GAUSS_COMPONENT = 1


def noise_rng(seed: int, stream: int, component: int = POISSON_COMPONENT) -> np.random.Generator:
    """Generator for one noise component of one item: ``SeedSequence([seed, stream, component])``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream), int(component)])))


def add_noise(sino, cfg: NoiseConfig, stream: int = 0) -> np.ndarray:
    """Poisson counts at ``photons_i0`` plus post-log Gaussian noise.

    ``sigma = gauss_fraction * max|Y|`` of the clean sinogram; counts are clamped
    to at least one photon before the log. The two components draw from
    separate streams, so for a fixed ``(seed, stream)`` the Gaussian part is
    the same at every dose and only the Poisson part changes with ``photons_i0``.
    """
    y = np.asarray(sino.data if isinstance(sino, Sinogram) else sino, dtype=np.float64)
    if np.any(y < 0):
        raise ValueError("sinogram has negative line integrals")
    counts = noise_rng(cfg.seed, stream, POISSON_COMPONENT).poisson(cfg.photons_i0 * np.exp(-y))
    noisy = -np.log(np.maximum(counts, 1) / cfg.photons_i0)
    sigma = cfg.gauss_fraction * float(np.max(np.abs(y))) if y.size else 0.0
    noisy = noisy + noise_rng(cfg.seed, stream, GAUSS_COMPONENT).normal(0.0, 1.0, size=y.shape) * sigma
    return noisy


def jittered_phantom(rng: np.random.Generator, base: PhantomSpec = tomo.SHEPP_LOGAN,
                     amount: float = 0.1, max_radius: float = 0.98) -> PhantomSpec:
    """Perturb every ellipse parameter by a factor in ``[1 - amount, 1 + amount]``.

    The jittered phantom is shrunk about the origin when needed so that every
    ellipse stays inside ``max_radius``.
    """
    ellipses = []
    for e in base.ellipses:
        f = rng.uniform(1.0 - amount, 1.0 + amount, size=6)
        ellipses.append(tuple(float(v) for v in np.asarray(e) * f))
    reach = max(tomo.ellipse_extent(e) for e in ellipses)
    if reach > max_radius:
        k = max_radius / reach
        ellipses = [(cx * k, cy * k, a * k, b * k, phi, v) for cx, cy, a, b, phi, v in ellipses]
    return PhantomSpec(tuple(ellipses))


def phantom_family(count: int, seed: int) -> list[PhantomSpec]:
    """Canonical Shepp-Logan followed by ``count - 1`` jittered variants."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)])))
    return [tomo.SHEPP_LOGAN] + [jittered_phantom(rng) for _ in range(count - 1)]


def _split_tags(n: int, test_fraction: float) -> list[str]:
    n_test = int(math.ceil(n * test_fraction)) if n > 1 else 0
    n_test = min(n_test, n - 1)
    return ["train"] * (n - n_test) + ["test"] * n_test


def build_dataset(phantoms: Sequence, geom: ScanGeometry, alpha_max: int, cfg: NoiseConfig,
                  out_dir, test_fraction: float = 0.25) -> list[ManifestEntry]:
    """Write phantom, clean sinogram and noisy sinogram files plus ``manifest.json``.

    ``phantoms`` holds :class:`PhantomSpec` objects or already rasterized images.
    Both sinograms live on the sparse ``alpha_max``-view geometry; the clean one
    is the exact forward projection of the phantom image. The last
    ``ceil(n * test_fraction)`` entries form the test split.
    """
    if not phantoms:
        raise ValueError("build_dataset needs at least one phantom")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sparse = make_sparse_geometry(geom, alpha_max)
    gdict = sparse.to_dict()
    entries = []
    tags = _split_tags(len(phantoms), test_fraction)
    for i, (ph, split) in enumerate(zip(phantoms, tags)):
        img = tomo.rasterize_phantom(ph, geom) if isinstance(ph, PhantomSpec) else np.asarray(ph, dtype=np.float64)
        # round-trip through float32 so the stored sinogram equals P(stored phantom)
        img = img.astype(np.float32).astype(np.float64)
        clean = tomo.forward_project(img, sparse).data
        noisy = add_noise(clean, cfg, stream=i)
        names = (f"phantom_{i:04d}.ctar", f"clean_{i:04d}.ctar", f"noisy_{i:04d}.ctar")
        try:
            formats.write_ctar(out / names[0], img, "image", gdict)
            formats.write_ctar(out / names[1], clean, "fan", gdict)
            formats.write_ctar(out / names[2], noisy, "fan", gdict)
        except OSError as exc:
            raise OSError(f"cannot write dataset file in {out}: {exc}") from exc
        entries.append(ManifestEntry(*names, alpha_max=int(alpha_max), photons_i0=float(cfg.photons_i0),
                                     gauss_fraction=float(cfg.gauss_fraction), seed=int(cfg.seed),
                                     split=split))
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps([dataclasses.asdict(e) for e in entries], indent=1))
    return entries


def load_manifest(path) -> list[ManifestEntry]:
    """Parse and validate a manifest; raises ``ValueError`` naming the problem."""
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except OSError as exc:
        raise ValueError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(records, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    fields = {f.name for f in dataclasses.fields(ManifestEntry)}
    entries = []
    for k, rec in enumerate(records):
        if not isinstance(rec, dict) or set(rec) != fields:
            raise ValueError(f"{path}: record {k} must have exactly the fields {sorted(fields)}")
        if rec["split"] not in ("train", "test"):
            raise ValueError(f"{path}: record {k} has bad split {rec['split']!r}")
        for key in ("phantom", "clean_sino", "noisy_sino"):
            if not (path.parent / rec[key]).is_file():
                raise ValueError(f"{path}: record {k} references missing file {rec[key]}")
        entries.append(ManifestEntry(**rec))
    return entries


def load_entry(manifest_dir, entry: ManifestEntry) -> dict:
    """Read one entry's arrays: ``noisy``, ``clean``, ``phantom`` and ``geometry``."""
    base = Path(manifest_dir)
    phantom, _, _ = formats.read_ctar(base / entry.phantom)
    clean, _, gdict = formats.read_ctar(base / entry.clean_sino)
    noisy, kind, _ = formats.read_ctar(base / entry.noisy_sino)
    if kind != "fan":
        raise formats.FormatError(f"{base / entry.noisy_sino}: expected a fan sinogram")
    geom = ScanGeometry.from_dict(gdict)
    return {"noisy": noisy, "clean": clean, "phantom": phantom, "geometry": geom}
