"""Time the compiled and pure-numpy projection kernels on the default geometry.

    python3 benchmarks/bench_kernels.py [--repeat N] [--views A] [--size S]

Prints best-of-N wall time per kernel and backend, the speed-up, and the
maximum relative disagreement between the two backends.
"""

from __future__ import annotations

import argparse
import math
import timeit

import numpy as np

from dudotrans import _kernels_py
from dudotrans.tomo import ScanGeometry

try:
    from dudotrans import _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def kernel_cases(geom: ScanGeometry, rng: np.random.Generator) -> dict[str, tuple]:
    h, w = geom.image_size
    image = rng.random(geom.image_size)
    step = geom.pixel_spacing / 2.0
    nsamp = int(math.ceil(2.0 * geom.pixel_spacing * math.hypot(0.5 * (h + 1), 0.5 * (w + 1)) / step)) + 1
    c, s = np.cos(geom.parallel_angles), np.sin(geom.parallel_angles)
    par = rng.random(geom.parallel_shape)
    return {
        "fan_project": (image, geom.view_angles, geom.detector_angles, geom.source_to_iso,
                        geom.pixel_spacing, step, nsamp),
        "backproject": (par, c, s, geom.offsets[0], geom.offset_spacing, h, w, geom.pixel_spacing),
        "project_parallel": (image, c, s, geom.offsets[0], geom.offset_spacing, geom.num_detectors,
                             geom.pixel_spacing),
    }


def best_time(fn, args, repeat: int) -> float:
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--views", type=int, default=96)
    p.add_argument("--size", type=int, default=128)
    args = p.parse_args(argv)

    geom = ScanGeometry(num_views=args.views, num_detectors=2 * args.size, image_size=(args.size, args.size))
    cases = kernel_cases(geom, np.random.default_rng(0))
    print(f"geometry: {args.views} views x {geom.num_detectors} detectors, {args.size}x{args.size} image; "
          f"best of {args.repeat}")
    print(f"{'kernel':<18}{'python [ms]':>12}{'cython [ms]':>12}{'speed-up':>10}{'max rel diff':>14}")
    for name, kargs in cases.items():
        t_py = best_time(getattr(_kernels_py, name), kargs, args.repeat)
        if _kernels_c is None:
            print(f"{name:<18}{t_py * 1e3:>12.2f}{'n/a':>12}{'':>10}{'':>14}")
            continue
        t_c = best_time(getattr(_kernels_c, name), kargs, args.repeat)
        a = getattr(_kernels_c, name)(*kargs)
        b = getattr(_kernels_py, name)(*kargs)
        diff = float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
        print(f"{name:<18}{t_py * 1e3:>12.2f}{t_c * 1e3:>12.2f}{t_py / t_c:>9.1f}x{diff:>14.2e}")


if __name__ == "__main__":
    main()
