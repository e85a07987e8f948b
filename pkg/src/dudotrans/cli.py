"""Command-line entry point: ``dudotrans <command> ...``.

Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import formats, metrics, simulate, tomo, train
from .config import ConfigError, RunConfig, load_run_config, validate
from .model import count_parameters, DuDoTransModel, load_checkpoint
from .tomo import ScanGeometry

log = logging.getLogger("dudotrans")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

# display window in HU and the linear map from normalized attenuation to HU
HU_WINDOW = (-1000.0, 800.0)
HU_AT_ZERO = -1000.0
HU_PER_UNIT = 4000.0

METHODS = ("fbp", "imgtrans", "dudotrans")


class UsageError(Exception):
    """Bad arguments or inputs; reported with exit code 2."""


# --------------------------------------------------------------------------
# helpers


def to_hu(mu: np.ndarray) -> np.ndarray:
    return HU_AT_ZERO + HU_PER_UNIT * np.asarray(mu, dtype=np.float64)


def write_png(path: Path, image: np.ndarray) -> None:
    """8-bit PNG of ``image`` in the [-1000, 800] HU display window."""
    from PIL import Image

    lo, hi = HU_WINDOW
    scaled = np.clip((to_hu(image) - lo) / (hi - lo), 0.0, 1.0)
    Image.fromarray(np.round(scaled * 255.0).astype(np.uint8), mode="L").save(path)


def _ctar_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise UsageError(f"{directory}: not a directory")
    return {p.name: p for p in sorted(directory.glob("*.ctar"))}


def _geometry_for_image(shape: tuple[int, int], views: int) -> ScanGeometry:
    return ScanGeometry(num_views=views, num_detectors=2 * max(shape), image_size=tuple(shape))


def _check_geometry_overrides(cfg: RunConfig, geom: ScanGeometry) -> None:
    actual = geom.to_dict()
    for key, val in cfg.geometry.items():
        want = list(val) if key == "image_size" else val
        if actual.get(key) != want:
            raise ConfigError(f"geometry.{key}={val!r} disagrees with the dataset ({actual.get(key)!r})")


def _load_items(cfg: RunConfig, split: str) -> list[dict]:
    manifest = cfg.manifest_path()
    if not manifest.is_file():
        raise UsageError(f"{manifest}: manifest not found")
    items = train.load_split(manifest, split)
    if not items:
        raise UsageError(f"{manifest}: no '{split}' entries")
    _check_geometry_overrides(cfg, items[0]["geometry"])
    return items


def _evaluate(recon_fn, items: list[dict], mcfg: metrics.MetricConfig) -> dict:
    rows = []
    for it in items:
        rec = recon_fn(it)
        if not np.all(np.isfinite(rec)):
            raise train.NumericalError("reconstruction contains NaN or Inf")
        gt = np.asarray(it["phantom"], dtype=np.float64)
        ms, _ = metrics.ms_ssim(rec, gt, mcfg, return_levels=True)
        rows.append((metrics.psnr(rec, gt, mcfg), ms, metrics.rmse(rec, gt)))
    arr = np.array(rows)
    return {"psnr": float(arr[:, 0].mean()), "ms_ssim": float(arr[:, 1].mean()), "rmse": float(arr[:, 2].mean())}


def _fbp_recon(it: dict) -> np.ndarray:
    return tomo.fbp(np.asarray(it["noisy"], dtype=np.float64), it["geometry"])


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    if args.count < 1 or args.size < 8:
        raise UsageError("--count must be >= 1 and --size >= 8")
    if not 0 <= args.seed < 2 ** 64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    geom = _geometry_for_image((args.size, args.size), 2)
    gdict = {"image_size": [args.size, args.size], "pixel_spacing": geom.pixel_spacing}
    for i, spec in enumerate(simulate.phantom_family(args.count, args.seed)):
        img = tomo.rasterize_phantom(spec, geom)
        formats.write_ctar(out / f"phantom_{i:04d}.ctar", img, "image", {**gdict, "ellipses": spec.to_list()})
    log.info("wrote %d phantoms to %s", args.count, out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    validate({"geometry": {"num_views": args.views},
              "noise": {"photons_i0": args.photons, "gauss_fraction": args.gauss, "seed": args.seed}},
             "simulate arguments")
    src = Path(getattr(args, "in"))
    files = [p for name, p in _ctar_files(src).items() if name.startswith("phantom_")]
    if not files:
        raise UsageError(f"{src}: no phantom_*.ctar files")
    images = []
    for p in files:
        data, kind, _ = formats.read_ctar(p)
        if kind != "image":
            raise UsageError(f"{p}: expected an image file, found {kind}")
        images.append(data.astype(np.float64))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise UsageError(f"{src}: phantoms differ in size {sorted(shapes)}")
    geom = _geometry_for_image(images[0].shape, args.views)
    cfg = simulate.NoiseConfig(photons_i0=args.photons, gauss_fraction=args.gauss, seed=args.seed)
    entries = simulate.build_dataset(images, geom, args.views, cfg, Path(args.out))
    log.info("wrote %d entries to %s", len(entries), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.strict_deterministic:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, strict_deterministic=True))
    items = _load_items(cfg, "train")
    model = DuDoTransModel(cfg.model_config(items[0]["geometry"]))
    res = train.train_loop(model, items, cfg.train, Path(args.out))
    log.info("trained %s for %d epochs; final epoch mean loss %.6g", cfg.variant, cfg.train.epochs,
             res.epoch_means[-1])
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    data, kind, gdict = formats.read_ctar(args.sino)
    if kind != "fan":
        raise UsageError(f"{args.sino}: expected a fan sinogram, found {kind}")
    try:
        geom = ScanGeometry.from_dict(gdict)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{args.sino}: geometry trailer is invalid ({exc})") from exc
    if args.method == "fbp":
        image = tomo.fbp(data.astype(np.float64), geom)
    else:
        if not args.ckpt:
            raise UsageError(f"--method {args.method} needs --ckpt")
        model, _, _ = load_checkpoint(args.ckpt)
        if model.cfg.variant != args.method:
            raise UsageError(f"{args.ckpt}: checkpoint holds a '{model.cfg.variant}' model, not '{args.method}'")
        if model.geometry != geom:
            raise UsageError(f"{args.ckpt}: checkpoint geometry does not match {args.sino}")
        image = model.reconstruct(data)
    if not np.all(np.isfinite(image)):
        raise train.NumericalError("reconstruction contains NaN or Inf")
    formats.write_ctar(args.out, image, "image", {"image_size": list(geom.image_size),
                                                   "pixel_spacing": geom.pixel_spacing})
    if args.png:
        write_png(Path(args.png), image)
    return EXIT_OK


def cmd_eval(args) -> int:
    mcfg = load_run_config(args.config).metrics if args.config else metrics.MetricConfig()
    pred = _ctar_files(Path(args.pred))
    gt = _ctar_files(Path(args.gt))
    if set(pred) != set(gt):
        missing = sorted(set(pred) ^ set(gt))
        raise UsageError(f"prediction and ground-truth file sets differ: {', '.join(missing)}")
    if not pred:
        raise UsageError(f"{args.pred}: no .ctar files")
    rows = []
    for name in sorted(pred):
        a, _, _ = formats.read_ctar(pred[name])
        b, _, _ = formats.read_ctar(gt[name])
        a = a.astype(np.float64)
        b = b.astype(np.float64)
        if a.shape != b.shape:
            raise UsageError(f"{name}: shape {a.shape} vs {b.shape}")
        if not np.all(np.isfinite(a)):
            raise train.NumericalError(f"{pred[name]}: contains NaN or Inf")
        ms, levels = metrics.ms_ssim(a, b, mcfg, return_levels=True)
        rows.append([name, metrics.psnr(a, b, mcfg), ms, levels, metrics.rmse(a, b)])
    means = ["mean"] + [float(np.mean([r[k] for r in rows])) for k in range(1, 5)]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "psnr", "ms_ssim", "ssim_levels_used", "rmse"])
        for r in rows + [means]:
            w.writerow([r[0]] + [repr(float(v)) if k != 3 or r[0] == "mean" else str(v)
                                 for k, v in enumerate(r[1:], start=1)])
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    if args.strict_deterministic:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, strict_deterministic=True))
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in METHODS]
    if not variants or unknown:
        raise UsageError(f"--variants must list some of {', '.join(METHODS)}; got {args.variants!r}")
    train_items = _load_items(cfg, "train")
    test_items = _load_items(cfg, "test")
    geom = train_items[0]["geometry"]
    out = Path(args.out)
    runs = out.with_name(out.stem + "_runs")
    rows = []
    for v in variants:
        if v == "fbp":
            scores = _evaluate(_fbp_recon, test_items, cfg.metrics)
            params = 0
        else:
            model = DuDoTransModel(cfg.model_config(geom, v))
            train.train_loop(model, train_items, cfg.train, runs / v)
            scores = _evaluate(lambda it: model.reconstruct(it["noisy"]).astype(np.float64), test_items,
                               cfg.metrics)
            params = count_parameters(model)
        rows.append([v, scores["psnr"], scores["ms_ssim"], scores["rmse"], params])
        log.info("%s: psnr %.3f ms_ssim %.4f", v, scores["psnr"], scores["ms_ssim"])
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "psnr", "ms_ssim", "rmse", "param_count"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3]), r[4]])
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dudotrans", description="Sparse-view CT: data, training, reconstruction.")
    p.add_argument("--strict-deterministic", action="store_true",
                   help="single-threaded numeric kernels for bit-reproducible output")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write randomized Shepp-Logan phantoms")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("simulate", help="sparse-view noisy sinograms and a manifest")
    s.add_argument("--views", type=int, required=True)
    s.add_argument("--photons", type=float, default=5e6)
    s.add_argument("--gauss", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--in", required=True, help="directory with phantom_*.ctar")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="reconstruct one sinogram")
    s.add_argument("--ckpt")
    s.add_argument("--sino", required=True)
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--png", help="also write an 8-bit PNG in the [-1000, 800] HU window")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", help="PSNR / MS-SSIM / RMSE report")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="run config whose metrics section to use")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and compare fbp / imgtrans / dudotrans")
    s.add_argument("--config", required=True)
    s.add_argument("--variants", default="fbp,imgtrans,dudotrans")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    guard = threadpool_limits(limits=1) if args.strict_deterministic else contextlib.nullcontext()
    try:
        with guard:
            return args.func(args)
    except train.NumericalError as exc:
        print(f"dudotrans: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, formats.FormatError, ValueError, OSError) as exc:
        print(f"dudotrans: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
