"""Low-dose photon-count simulation and the log transform back to line integrals."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

EPS_CLAMP = 0.5


class MeasurementError(ValueError):
    pass


@dataclass(frozen=True)
class DoseModel:
    """Source intensity ``b`` and background mean ``r`` per ray (scalars or arrays)."""

    b: float | np.ndarray = 5e4
    r: float | np.ndarray = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.b) < 0) or np.any(np.asarray(self.r) < 0):
            raise MeasurementError("dose model needs b >= 0 and r >= 0")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator derived from ``seed`` and a stream name.

    Named streams keep subsystems (phantoms, noise, training, langevin) from
    shifting each other's draws when one of them changes.
    """
    digest = hashlib.sha256(name.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), key])))


def expected_counts(line_integrals: np.ndarray, dose: DoseModel) -> np.ndarray:
    return np.asarray(dose.b) * np.exp(-np.asarray(line_integrals, dtype=np.float64)) + np.asarray(dose.r)


def simulate_counts(line_integrals: np.ndarray, dose: DoseModel, rng: np.random.Generator) -> np.ndarray:
    """Poisson counts with mean ``b exp(-Ax) + r`` per ray, returned as floats."""
    line_integrals = np.asarray(line_integrals, dtype=np.float64)
    if not np.all(np.isfinite(line_integrals)):
        raise MeasurementError("line integrals must be finite")
    if np.any(line_integrals < 0):
        raise MeasurementError("negative line integral (non-physical attenuation)")
    mean = np.broadcast_to(expected_counts(line_integrals, dose), line_integrals.shape)
    return rng.poisson(mean).astype(np.float64)


def counts_to_log_sinogram(
    counts: np.ndarray, dose: DoseModel, eps: float = EPS_CLAMP
) -> tuple[np.ndarray, np.ndarray]:
    """Log-transform counts into line integrals ``y`` and Gaussian weights ``w``.

    ``y = ln(b / max(I - r, eps))`` and ``w = (I_hat - r)^2 / I_hat`` where
    ``I_hat = max(I, eps)`` is the plug-in estimate of the mean count. The
    weights are the inverse of the approximate variance of ``y``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise MeasurementError("counts must be nonnegative")
    b = np.broadcast_to(np.asarray(dose.b, dtype=np.float64), counts.shape)
    r = np.broadcast_to(np.asarray(dose.r, dtype=np.float64), counts.shape)
    if np.any(b <= 0):
        raise MeasurementError("source intensity b must be > 0 for the log transform")
    y = np.log(b / np.maximum(counts - r, eps))
    i_hat = np.maximum(counts, eps)
    w = np.maximum(i_hat - r, 0.0) ** 2 / i_hat
    return y, w
