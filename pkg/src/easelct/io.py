"""Raw float32 image/sinogram files with a one-line text header, plus PNG export."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MAGIC = "EASELCT-RAW-V1"
SINOGRAM_DOMAINS = ("LineIntegral", "PhotonCount", "Weight")


class FileFormatError(ValueError):
    pass


def _write(path, meta: dict, values: np.ndarray) -> None:
    if any(" " in str(v) or "=" in str(k) for k, v in meta.items()):
        raise ValueError("header keys and values must not contain spaces or '='")
    header = " ".join([MAGIC] + [f"{k}={v}" for k, v in meta.items()]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def _read(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    tokens = line.decode("ascii", errors="replace").split()
    if not tokens or tokens[0] != MAGIC:
        raise FileFormatError(f"{path}: bad magic tag")
    try:
        meta = dict(tok.split("=", 1) for tok in tokens[1:])
    except ValueError as exc:
        raise FileFormatError(f"{path}: malformed header") from exc
    return meta, payload


def _payload(path, payload: bytes, shape: tuple[int, int]) -> np.ndarray:
    n = shape[0] * shape[1]
    if n <= 0 or len(payload) != 4 * n:
        raise FileFormatError(f"{path}: header dims {shape} need {4 * n} bytes, payload has {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_image(
    path: str | Path, image: np.ndarray, pixel_size: float = 1.0, domain: str = "attenuation", stamp: dict | None = None
) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    ny, nx = image.shape
    meta = {"kind": "image", "nx": nx, "ny": ny, "pixel_size_mm": repr(float(pixel_size)), "domain": domain}
    _write(path, {**meta, **(stamp or {})}, image)


def load_image(path: str | Path) -> tuple[np.ndarray, dict]:
    """Return ``(values, header)``; values are float32 as stored."""
    meta, payload = _read(path)
    if meta.get("kind") != "image":
        raise FileFormatError(f"{path}: not an image file")
    try:
        shape = (int(meta["ny"]), int(meta["nx"]))
    except (KeyError, ValueError) as exc:
        raise FileFormatError(f"{path}: bad image dims") from exc
    return _payload(path, payload, shape), meta


def save_sinogram(
    path: str | Path, sino: np.ndarray, det_spacing: float = 1.0, domain: str = "LineIntegral", stamp: dict | None = None
) -> None:
    if domain not in SINOGRAM_DOMAINS:
        raise ValueError(f"domain must be one of {SINOGRAM_DOMAINS}")
    sino = np.asarray(sino)
    n_angles, n_det = sino.shape
    meta = {"kind": "sinogram", "n_angles": n_angles, "n_det": n_det, "det_spacing_mm": repr(float(det_spacing)), "domain": domain}
    _write(path, {**meta, **(stamp or {})}, sino)


def load_sinogram(path: str | Path) -> tuple[np.ndarray, dict]:
    meta, payload = _read(path)
    if meta.get("kind") != "sinogram":
        raise FileFormatError(f"{path}: not a sinogram file")
    if meta.get("domain") not in SINOGRAM_DOMAINS:
        raise FileFormatError(f"{path}: unknown sinogram domain {meta.get('domain')!r}")
    try:
        shape = (int(meta["n_angles"]), int(meta["n_det"]))
    except (KeyError, ValueError) as exc:
        raise FileFormatError(f"{path}: bad sinogram dims") from exc
    return _payload(path, payload, shape), meta


def export_png(path: str | Path, image: np.ndarray, window: tuple[float, float] | None = None) -> None:
    """16-bit grayscale PNG, min-max windowed. For viewing only."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = window if window is not None else (image.min(), image.max())
    scaled = np.zeros_like(image) if hi <= lo else np.clip((image - lo) / (hi - lo), 0, 1)
    PILImage.fromarray((scaled * 65535).round().astype(np.uint16)).save(path)
