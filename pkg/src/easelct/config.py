"""Experiment configuration: defaults, YAML loading, dotted overrides and validation."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .engine import EaselParams
from .geometry import FanBeamGeometry, ImageGrid, check_coverage
from .measurement import DoseModel
from .score import make_schedule

METHODS = ("fbp", "tv", "easel")

# Desk-scale default: a 64x64 grid of 5 mm pixels (320 mm field of view)
# seen by a 128-cell flat detector; the EASEL block carries the reference
# reconstruction settings.
DEFAULT_CONFIG: dict = {
    "seed": 0,
    "output_dir": "runs/default",
    "methods": ["fbp", "tv", "easel"],
    "grid": {"nx": 64, "ny": 64, "pixel_size_mm": 5.0},
    "geometry": {"n_angles": 360, "n_det": 128, "det_spacing_mm": 8.0, "sad_mm": 500.0, "sdd_mm": 1000.0},
    "dose": {"b_photons": 5.0e4, "r_photons": 0.0, "seed": None},
    "phantom": {
        "kind": "random_ellipse",
        "attenuation_per_unit": 0.04,  # 1/mm for a normalized value of 1
        "n_ellipses_min": 3,
        "n_ellipses_max": 8,
        "count": 1,
    },
    "schedule": {"sigma_first": 1.0, "sigma_last": 0.01, "L": 12},
    "easel": {
        "T": 150,
        "tau": 1.8e-5,
        "beta": 150.0,
        "gamma": 0.5,
        "lambda": 150.0,
        "C": 10,
        "seed": None,
        "gradient_at": "x",
        "init": "zeros",
        "score": "trained",  # trained | checkpoint | analytic
        "checkpoint": None,
    },
    "training": {
        "n_images": 300,
        "patch": 8,
        "steps": 3000,
        "batch_size": 64,
        "lr": 1.0e-3,
        "lr_final": 1.0e-5,
        "hidden": None,
        "cache_dir": None,
    },
    "fbp": {"window": "ramp"},
    "tv": {"weights": [0.3, 1.0, 3.0, 10.0, 30.0], "n_iters": 200},
}

# keys that only move files around and never change a result
NON_SEMANTIC_KEYS = ("output_dir", "training.cache_dir")


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if key not in out:
            raise ConfigError(f"unknown config key {prefix}{key}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key} must be a mapping")
            out[key] = _merge(out[key], value, f"{prefix}{key}.")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | dict | None = None) -> dict:
    """Defaults, then the YAML file, then ``key.path=value`` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            cfg = _merge(cfg, yaml.safe_load(fh) or {})
    if isinstance(overrides, dict):
        for k, v in overrides.items():
            set_key(cfg, k, v)
    else:
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            set_key(cfg, k.strip(), yaml.safe_load(v))
    validate(cfg)
    return cfg


def get_key(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted}")
        node = node[part]
    return node


def set_key(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {dotted}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted}")
    node[parts[-1]] = value


def _strip(cfg: dict) -> dict:
    out = copy.deepcopy(cfg)
    for dotted in NON_SEMANTIC_KEYS:
        *parents, leaf = dotted.split(".")
        node = out
        for p in parents:
            node = node.get(p, {})
        node.pop(leaf, None)
    return out


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_hash(cfg: dict) -> str:
    """Hash of everything that can change a result."""
    return stable_hash(_strip(cfg))


def dump_config(cfg: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


# -- typed views ------------------------------------------------------------


def grid_from(cfg) -> ImageGrid:
    g = cfg["grid"]
    return ImageGrid(int(g["nx"]), int(g["ny"]), float(g["pixel_size_mm"]))


def geometry_from(cfg) -> FanBeamGeometry:
    return FanBeamGeometry.from_dict(cfg["geometry"])


def dose_from(cfg) -> DoseModel:
    return DoseModel(float(cfg["dose"]["b_photons"]), float(cfg["dose"]["r_photons"]))


def schedule_from(cfg):
    s = cfg["schedule"]
    return make_schedule(float(s["sigma_first"]), float(s["sigma_last"]), int(s["L"]))


def easel_params_from(cfg) -> EaselParams:
    e = cfg["easel"]
    return EaselParams(
        T=int(e["T"]),
        tau=float(e["tau"]),
        beta=float(e["beta"]),
        gamma=float(e["gamma"]),
        lam=float(e["lambda"]),
        channels=int(e["C"]),
        seed=int(cfg["seed"] if e["seed"] is None else e["seed"]),
        gradient_at=str(e["gradient_at"]),
        scale=float(cfg["phantom"]["attenuation_per_unit"]),
    )


def validate(cfg: dict) -> None:
    """Check every block against its module's invariants before any compute."""
    try:
        grid = grid_from(cfg)
        geometry = geometry_from(cfg)
        check_coverage(geometry, grid)
        dose_from(cfg)
        schedule_from(cfg)
        easel_params_from(cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    bad = [m for m in cfg["methods"] if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
    ph = cfg["phantom"]
    if ph["kind"] not in ("random_ellipse", "shepp_logan"):
        raise ConfigError(f"unknown phantom kind {ph['kind']!r}")
    if not float(ph["attenuation_per_unit"]) > 0 or int(ph["count"]) < 1:
        raise ConfigError("phantom.attenuation_per_unit must be > 0 and phantom.count >= 1")
    if not 0 <= int(ph["n_ellipses_min"]) <= int(ph["n_ellipses_max"]):
        raise ConfigError("need 0 <= n_ellipses_min <= n_ellipses_max")
    if cfg["easel"]["init"] not in ("zeros", "fbp"):
        raise ConfigError("easel.init must be 'zeros' or 'fbp'")
    if cfg["easel"]["score"] not in ("trained", "checkpoint", "analytic"):
        raise ConfigError("easel.score must be 'trained', 'checkpoint' or 'analytic'")
    if cfg["easel"]["score"] == "checkpoint" and not cfg["easel"]["checkpoint"]:
        raise ConfigError("easel.score = checkpoint needs easel.checkpoint")
    if cfg["fbp"]["window"] not in ("ramp", "hann"):
        raise ConfigError("fbp.window must be 'ramp' or 'hann'")
    if any(float(w) < 0 for w in cfg["tv"]["weights"]) or int(cfg["tv"]["n_iters"]) < 1:
        raise ConfigError("tv weights must be >= 0 and n_iters >= 1")
    t = cfg["training"]
    if int(t["steps"]) < 1 or int(t["batch_size"]) < 1 or int(t["n_images"]) < 1:
        raise ConfigError("training steps, batch_size and n_images must be >= 1")
    if int(t["patch"]) > min(grid.nx, grid.ny):
        raise ConfigError("training.patch larger than the image grid")
