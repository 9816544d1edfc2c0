"""Command-line entry point: ``easelct <subcommand> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from . import pipeline
from .geometry import Projector
from .io import export_png, load_image, load_sinogram, save_image, save_sinogram
from .measurement import counts_to_log_sinogram, simulate_counts, substream
from .metrics import evaluate
from .score import save_checkpoint, smoothed_losses


class CliError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _load(args) -> dict:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "output_dir", None) is not None:
        overrides.append(f"output_dir={args.output_dir}")
    try:
        return cfgmod.load_config(args.config, overrides)
    except (cfgmod.ConfigError, OSError, yaml.YAMLError) as exc:
        raise CliError("config", str(exc)) from exc


def _out(cfg, path: str | None, default: str) -> Path:
    p = Path(path) if path else Path(cfg["output_dir"]) / default
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except CliError:
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced as a stage failure
        raise CliError(name, f"{type(exc).__name__}: {exc}") from exc


def cmd_phantom(args):
    cfg = _load(args)
    phantoms = _stage("phantom", pipeline.make_phantoms, cfg)
    grid = cfgmod.grid_from(cfg)
    for i, ph in enumerate(phantoms):
        path = _out(cfg, args.out if len(phantoms) == 1 else None, f"phantom_{i:02d}.raw")
        save_image(path, ph, grid.pixel_size, "normalized", pipeline._stamp(cfg))
        if args.png:
            export_png(path.with_suffix(".png"), ph)
        print(path)


def cmd_project(args):
    cfg = _load(args)
    image, _ = _stage("project", load_image, args.image)
    projector = _stage("project", Projector, cfgmod.geometry_from(cfg), cfgmod.grid_from(cfg))
    k = float(cfg["phantom"]["attenuation_per_unit"])
    sino = _stage("project", projector.forward, image.astype(np.float64) * k)
    path = _out(cfg, args.out, "line_integrals.raw")
    save_sinogram(path, sino, projector.geometry.det_spacing, "LineIntegral", pipeline._stamp(cfg))
    print(path)


def cmd_simulate(args):
    cfg = _load(args)
    line, meta = _stage("simulate", load_sinogram, args.sinogram)
    if meta["domain"] != "LineIntegral":
        raise CliError("simulate", f"expected a LineIntegral sinogram, got {meta['domain']}")
    dose = cfgmod.dose_from(cfg)
    seed = cfg["seed"] if cfg["dose"]["seed"] is None else cfg["dose"]["seed"]
    counts = _stage("simulate", simulate_counts, line.astype(np.float64), dose, substream(seed, "noise"))
    y, w = _stage("simulate", counts_to_log_sinogram, counts, dose)
    spacing = float(meta["det_spacing_mm"])
    stamp = pipeline._stamp(cfg)
    base = _out(cfg, args.out, "sinogram.raw")
    save_sinogram(base, y, spacing, "LineIntegral", stamp)
    save_sinogram(base.with_name(base.stem + "_counts.raw"), counts, spacing, "PhotonCount", stamp)
    save_sinogram(base.with_name(base.stem + "_weights.raw"), w, spacing, "Weight", stamp)
    print(base)


def cmd_train_score(args):
    cfg = _load(args)
    result = _stage("train-score", pipeline.train_score_model, cfg)
    path = _out(cfg, args.out, "score.ckpt")
    save_checkpoint(result.model, path)
    sm = smoothed_losses(result.losses, min(50, len(result.losses)))
    print(f"{path} final smoothed loss {sm[-1]:.5f}" if len(sm) else str(path))


def cmd_reconstruct(args):
    cfg = _load(args)
    y, meta = _stage("reconstruct", load_sinogram, args.sinogram)
    if meta["domain"] != "LineIntegral":
        raise CliError("reconstruct", f"expected a LineIntegral sinogram, got {meta['domain']}")
    reference = None
    if args.reference:
        reference = load_image(args.reference)[0].astype(np.float64)
    projector = _stage("reconstruct", Projector, cfgmod.geometry_from(cfg), cfgmod.grid_from(cfg))
    score = _stage("train-score", pipeline.get_score, cfg) if args.method == "easel" else None
    seed = cfg["seed"] if cfg["easel"]["seed"] is None else cfg["easel"]["seed"]
    img, extra = _stage(
        args.method,
        pipeline.reconstruct,
        cfg,
        args.method,
        y.astype(np.float64),
        projector,
        score=score,
        rng=substream(seed, "langevin/0"),
        reference=reference,
    )
    path = _out(cfg, args.out, f"{args.method}.raw")
    save_image(path, img, projector.grid.pixel_size, "normalized", pipeline._stamp(cfg))
    if "trace" in extra:
        extra["trace"].write_csv(path.with_suffix(".trace.csv"))
    if args.png:
        export_png(path.with_suffix(".png"), img)
    print(path)


def cmd_evaluate(args):
    x, _ = _stage("evaluate", load_image, args.image)
    ref, _ = _stage("evaluate", load_image, args.reference)
    m = _stage("evaluate", evaluate, x.astype(np.float64), ref.astype(np.float64))
    print(f"mae\t{m.mae!r}\npsnr\t{m.psnr!r}\nssim\t{m.ssim!r}")


def cmd_run(args):
    cfg = _load(args)
    report = pipeline.run_pipeline(cfg)
    print(pipeline.summarize(report.directory))
    if not report.ok:
        stage, msg = report.errors[0]
        raise CliError(stage, msg)


def cmd_sweep(args):
    cfg = _load(args)
    values = [yaml.safe_load(v) for v in args.values.split(",")] if args.values.strip() else []
    try:
        rows = pipeline.sweep(cfg, args.param, values, args.out)
    except cfgmod.ConfigError as exc:
        raise CliError("config", str(exc)) from exc
    print("\t".join(pipeline.SWEEP_COLUMNS))
    for r in rows:
        print("\t".join(pipeline._fmt(r.get(c, "")) for c in pipeline.SWEEP_COLUMNS))


def cmd_report(args):
    print(_stage("report", pipeline.summarize, args.dir))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="easelct", description="Score-prior CT reconstruction experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir")
        return p

    p = with_config(sub.add_parser("phantom", help="render phantom(s)"))
    p.add_argument("--out")
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_phantom)

    p = with_config(sub.add_parser("project", help="forward-project an image"))
    p.add_argument("image")
    p.add_argument("--out")
    p.set_defaults(func=cmd_project)

    p = with_config(sub.add_parser("simulate", help="Poisson counts and log transform"))
    p.add_argument("sinogram")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = with_config(sub.add_parser("train-score", help="train the score prior"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_score)

    p = with_config(sub.add_parser("reconstruct", help="reconstruct a sinogram"))
    p.add_argument("sinogram")
    p.add_argument("--method", choices=cfgmod.METHODS, default="easel")
    p.add_argument("--reference", help="ground truth for trace metrics and TV weight choice")
    p.add_argument("--out")
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="MAE/PSNR/SSIM of an image against a reference")
    p.add_argument("image")
    p.add_argument("reference")
    p.set_defaults(func=cmd_evaluate)

    p = with_config(sub.add_parser("run", help="full pipeline"))
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("sweep", help="pipeline over values of one config key"))
    p.add_argument("param")
    p.add_argument("values", help="comma-separated values")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize a report directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"easelct: error in stage {exc.stage}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
