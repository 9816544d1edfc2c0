"""Config-driven experiment runs: phantoms, simulated scans, reconstructions, metrics."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .baselines import fbp_ramp, tv_reconstruct
from .engine import ReconTrace, easel_reconstruct
from .geometry import Projector
from .io import save_image, save_sinogram
from .measurement import counts_to_log_sinogram, simulate_counts, substream
from .metrics import evaluate
from .phantoms import random_ellipse_phantom, shepp_logan
from .score import (
    ChannelCopyScore,
    GmmDensity,
    TrainConfig,
    gmm_score_function,
    load_checkpoint,
    save_checkpoint,
    train_score,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("phantom", "method", "mae", "psnr", "ssim", "note")


@dataclass
class RunReport:
    directory: Path
    config_hash: str
    seed: int
    rows: list[dict] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def mean(self, method: str, metric: str) -> float:
        vals = [r[metric] for r in self.rows if r["method"] == method]
        return float(np.mean(vals)) if vals else float("nan")


def _stamp(cfg) -> dict:
    return {"config_hash": cfgmod.config_hash(cfg), "seed": int(cfg["seed"])}


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def make_phantoms(cfg) -> np.ndarray:
    """Ground-truth images in normalized units, shape (count, ny, nx)."""
    grid = cfgmod.grid_from(cfg)
    ph = cfg["phantom"]
    if ph["kind"] == "shepp_logan":
        return np.stack([shepp_logan(grid)] * int(ph["count"]))
    rng = substream(cfg["seed"], "phantom")
    rng_range = (int(ph["n_ellipses_min"]), int(ph["n_ellipses_max"]))
    return np.stack([random_ellipse_phantom(grid, rng, n_ellipses_range=rng_range) for _ in range(int(ph["count"]))])


def training_images(cfg) -> np.ndarray:
    grid = cfgmod.grid_from(cfg)
    ph = cfg["phantom"]
    rng = substream(cfg["seed"], "training-data")
    rng_range = (int(ph["n_ellipses_min"]), int(ph["n_ellipses_max"]))
    return np.stack([random_ellipse_phantom(grid, rng, n_ellipses_range=rng_range) for _ in range(int(cfg["training"]["n_images"]))])


def simulate_scan(cfg, phantom: np.ndarray, projector: Projector, rng: np.random.Generator):
    """Line integrals, counts and the log-transformed sinogram of one phantom."""
    k = float(cfg["phantom"]["attenuation_per_unit"])
    dose = cfgmod.dose_from(cfg)
    line = projector.forward(phantom * k)
    counts = simulate_counts(line, dose, rng)
    y, weights = counts_to_log_sinogram(counts, dose)
    return line, counts, y, weights


def _training_key(cfg) -> dict:
    t = {k: v for k, v in cfg["training"].items() if k != "cache_dir"}
    ph = {k: cfg["phantom"][k] for k in ("n_ellipses_min", "n_ellipses_max")}
    return {"seed": cfg["seed"], "grid": cfg["grid"], "schedule": cfg["schedule"], "C": cfg["easel"]["C"], "training": t, "phantom": ph}


def score_checkpoint_path(cfg) -> Path:
    cache = cfg["training"]["cache_dir"]
    name = f"score-{cfgmod.stable_hash(_training_key(cfg))}.ckpt"
    return Path(cache) / name if cache else Path(cfg["output_dir"]) / name


def train_score_model(cfg):
    t = cfg["training"]
    tc = TrainConfig(
        steps=int(t["steps"]),
        batch_size=int(t["batch_size"]),
        lr=float(t["lr"]),
        lr_final=None if t["lr_final"] is None else float(t["lr_final"]),
        patch=int(t["patch"]),
        channels=int(cfg["easel"]["C"]),
        hidden=None if t["hidden"] is None else tuple(int(h) for h in t["hidden"]),
    )
    result = train_score(training_images(cfg), cfgmod.schedule_from(cfg), tc, substream(cfg["seed"], "training"))
    return result


def get_score(cfg):
    """Score function for the EASEL block: trained (cached), from a checkpoint, or analytic."""
    e = cfg["easel"]
    if e["score"] == "analytic":
        # isotropic Gaussian fitted to the training images
        imgs = training_images(cfg)
        flat = imgs.reshape(imgs.shape[0], -1)
        gmm = GmmDensity([1.0], flat.mean(axis=0)[None], [max(float(flat.var(axis=0).mean()), 1e-6)])
        fn = gmm_score_function(gmm)
        shape = imgs.shape[1:]
        return lambda x, sigma: fn(np.reshape(x, -1), sigma).reshape(shape)
    if e["score"] == "checkpoint":
        model = load_checkpoint(e["checkpoint"])
    else:
        path = score_checkpoint_path(cfg)
        if path.exists():
            model = load_checkpoint(path)
        else:
            model = train_score_model(cfg).model
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            save_checkpoint(model, tmp)
            tmp.replace(path)
    if model.channels != int(e["C"]):
        raise ValueError(f"checkpoint has {model.channels} channels, config asks for C={e['C']}")
    return ChannelCopyScore(model)


def reconstruct(cfg, method: str, y: np.ndarray, projector: Projector, score=None, rng=None, reference=None):
    """Reconstruct in normalized units. Returns ``(image, extra)``."""
    k = float(cfg["phantom"]["attenuation_per_unit"])
    geometry, grid = projector.geometry, projector.grid
    if method == "fbp":
        return fbp_ramp(y, geometry, grid, cfg["fbp"]["window"]) / k, {}
    if method == "tv":
        return _tv_best(cfg, y, projector, reference)
    if method == "easel":
        params = cfgmod.easel_params_from(cfg)
        sched = cfgmod.schedule_from(cfg)
        x0 = fbp_ramp(y, geometry, grid) if cfg["easel"]["init"] == "fbp" else np.zeros(grid.shape)
        ref = None if reference is None else reference * k
        x, trace = easel_reconstruct(y, geometry, grid, score, sched, params, rng, x0, reference=ref, projector=projector)
        return x / k, {"trace": trace}
    raise ValueError(f"unknown method {method!r}")


def _tv_best(cfg, y, projector, reference):
    """TV over the configured weight grid; the weight with the best PSNR is kept."""
    k = float(cfg["phantom"]["attenuation_per_unit"])
    weights = [float(w) for w in cfg["tv"]["weights"]]
    if not weights:
        raise ValueError("tv.weights is empty")
    x0 = fbp_ramp(y, projector.geometry, projector.grid)
    best = None
    for w in weights:
        x = tv_reconstruct(y, projector.geometry, projector.grid, w, int(cfg["tv"]["n_iters"]), x0=x0, projector=projector) / k
        score = evaluate(x, reference).psnr if reference is not None else -w
        if best is None or score > best[0]:
            best = (score, w, x)
    return best[2], {"note": f"tv_weight={best[1]!r}"}


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_table(path: Path, rows: list[dict], columns, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def read_table(path: str | Path) -> tuple[list[dict], str]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = lines[0][2:] if lines and lines[0].startswith("# ") else ""
    body = lines[1:] if header else lines
    rows = list(csv.DictReader(body, delimiter="\t"))
    return rows, header


def run_pipeline(cfg: dict, output_dir: str | Path | None = None) -> RunReport:
    """Run every configured method on every phantom and write the report directory.

    Layout: ``config.yaml``, ``phantom_NN.raw``, ``sinogram_NN.raw``,
    ``counts_NN.raw``, ``<method>_NN.raw`` (normalized units),
    ``easel_trace_NN.csv``, ``metrics.tsv`` and, when anything failed,
    ``errors.tsv``. Every file is stamped with the config hash and seed.
    """
    cfg = copy.deepcopy(cfg)
    if output_dir is not None:
        cfg["output_dir"] = str(output_dir)
    cfgmod.validate(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)
    report = RunReport(out, stamp["config_hash"], stamp["seed"])
    cfgmod.dump_config(cfg, out / "config.yaml")
    header = f"config_hash={stamp['config_hash']} seed={stamp['seed']}"

    def fail(stage, exc):
        log.error("stage %s failed: %s", stage, exc)
        report.errors.append((stage, f"{type(exc).__name__}: {exc}"))

    def finish():
        write_table(out / "metrics.tsv", report.rows, METRIC_COLUMNS, header)
        err_path = out / "errors.tsv"
        if report.errors:
            write_table(err_path, [{"stage": s, "message": m} for s, m in report.errors], ("stage", "message"), header)
        elif err_path.exists():
            err_path.unlink()
        return report

    grid = cfgmod.grid_from(cfg)
    geometry = cfgmod.geometry_from(cfg)
    try:
        phantoms = make_phantoms(cfg)
    except Exception as exc:  # noqa: BLE001 - recorded in the report
        fail("phantom", exc)
        return finish()
    try:
        projector = Projector(geometry, grid)
    except Exception as exc:  # noqa: BLE001
        fail("project", exc)
        return finish()

    score = None
    if "easel" in cfg["methods"]:
        try:
            score = get_score(cfg)
        except Exception as exc:  # noqa: BLE001
            fail("train-score", exc)

    dose_seed = cfg["seed"] if cfg["dose"]["seed"] is None else cfg["dose"]["seed"]
    noise_rng = substream(dose_seed, "noise")
    easel_seed = cfg["seed"] if cfg["easel"]["seed"] is None else cfg["easel"]["seed"]
    for i, ph in enumerate(phantoms):
        tag = f"{i:02d}"
        save_image(out / f"phantom_{tag}.raw", ph, grid.pixel_size, "normalized", stamp)
        try:
            line, counts, y, _ = simulate_scan(cfg, ph, projector, noise_rng)
        except Exception as exc:  # noqa: BLE001
            fail(f"simulate[{tag}]", exc)
            continue
        save_sinogram(out / f"sinogram_{tag}.raw", y, geometry.det_spacing, "LineIntegral", stamp)
        save_sinogram(out / f"counts_{tag}.raw", counts, geometry.det_spacing, "PhotonCount", stamp)
        for method in cfg["methods"]:
            if method == "easel" and score is None:
                continue
            try:
                rng = substream(easel_seed, f"langevin/{i}")
                img, extra = reconstruct(cfg, method, y, projector, score=score, rng=rng, reference=ph)
            except Exception as exc:  # noqa: BLE001
                fail(f"{method}[{tag}]", exc)
                trace = getattr(exc, "trace", None)
                if isinstance(trace, ReconTrace):
                    trace.write_csv(out / f"{method}_trace_{tag}.csv")
                continue
            save_image(out / f"{method}_{tag}.raw", img, grid.pixel_size, "normalized", stamp)
            if "trace" in extra:
                extra["trace"].write_csv(out / f"{method}_trace_{tag}.csv")
            m = evaluate(img, ph)
            report.rows.append({"phantom": i, "method": method, "mae": m.mae, "psnr": m.psnr, "ssim": m.ssim, "note": extra.get("note", "")})
    return finish()


def sweep(cfg: dict, parameter: str, values, output_dir: str | Path | None = None) -> list[dict]:
    """One pipeline run per value of a dotted config key; one row per (value, method).

    All runs share one score cache, so a sweep over reconstruction settings
    trains the prior once. Failures are recorded in the row's status and the
    sweep continues.
    """
    root = Path(output_dir or cfg["output_dir"])
    cfgmod.get_key(cfg, parameter)  # unknown keys fail before any compute
    rows = []
    for value in values:
        run_cfg = copy.deepcopy(cfg)
        cfgmod.set_key(run_cfg, parameter, value)
        if run_cfg["training"]["cache_dir"] is None:
            run_cfg["training"]["cache_dir"] = str(root / "score-cache")
        run_dir = root / f"{parameter}={value}"
        try:
            cfgmod.validate(run_cfg)
            rep = run_pipeline(run_cfg, run_dir)
        except Exception as exc:  # noqa: BLE001 - recorded in the table
            rows.append({"parameter": parameter, "value": value, "method": "", "status": f"error: {exc}"})
            continue
        status = "ok" if rep.ok else "error: " + "; ".join(s for s, _ in rep.errors)
        methods = [m for m in run_cfg["methods"] if any(r["method"] == m for r in rep.rows)]
        if not methods:
            rows.append({"parameter": parameter, "value": value, "method": "", "status": status})
        for m in methods:
            rows.append(
                {
                    "parameter": parameter,
                    "value": value,
                    "method": m,
                    "mae": rep.mean(m, "mae"),
                    "psnr": rep.mean(m, "psnr"),
                    "ssim": rep.mean(m, "ssim"),
                    "status": status,
                }
            )
    root.mkdir(parents=True, exist_ok=True)
    write_table(root / "sweep.tsv", rows, SWEEP_COLUMNS, f"parameter={parameter} seed={cfg['seed']}")
    return rows


SWEEP_COLUMNS = ("parameter", "value", "method", "mae", "psnr", "ssim", "status")


def summarize(directory: str | Path) -> str:
    """Per-method mean metrics of a report directory as a plain-text table."""
    directory = Path(directory)
    rows, header = read_table(directory / "metrics.tsv")
    lines = [f"report {directory} ({header})", f"{'method':8s} {'n':>3s} {'MAE':>9s} {'PSNR':>8s} {'SSIM':>7s}"]
    for method in dict.fromkeys(r["method"] for r in rows):
        sel = [r for r in rows if r["method"] == method]
        mean = {k: np.mean([float(r[k]) for r in sel]) for k in ("mae", "psnr", "ssim")}
        lines.append(f"{method:8s} {len(sel):3d} {mean['mae']:9.5f} {mean['psnr']:8.3f} {mean['ssim']:7.4f}")
    err = directory / "errors.tsv"
    if err.exists():
        errs, _ = read_table(err)
        lines += [f"error in stage {e['stage']}: {e['message']}" for e in errs]
    return "\n".join(lines)
