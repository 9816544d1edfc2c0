"""Analytic ellipse phantoms rendered at pixel centers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ImageGrid

# (value, a, b, x0, y0, phi_deg) on the unit square [-1, 1]^2, modified
# Shepp-Logan intensities (Toft) so that soft-tissue contrast is visible.
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


@dataclass(frozen=True)
class Ellipse:
    value: float
    a: float
    b: float
    x0: float = 0.0
    y0: float = 0.0
    phi: float = 0.0  # radians, counter-clockwise

    def mask(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.phi), np.sin(self.phi)
        dx, dy = x - self.x0, y - self.y0
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


def render(ellipses, grid: ImageGrid, clip_max: float | None = None) -> np.ndarray:
    """Sum ellipse values at pixel centers in normalized [-1, 1] coordinates."""
    x, y = grid.pixel_centers()
    half = 0.5 * max(grid.extent)
    x, y = x / half, y / half
    img = np.zeros(grid.shape)
    for e in ellipses:
        img[e.mask(x, y)] += e.value
    return np.clip(img, 0.0, clip_max)


def shepp_logan(grid: ImageGrid) -> np.ndarray:
    """10-ellipse Shepp-Logan head phantom scaled to [0, 1]."""
    ellipses = [Ellipse(v, a, b, x0, y0, np.deg2rad(phi)) for v, a, b, x0, y0, phi in SHEPP_LOGAN]
    img = render(ellipses, grid)
    peak = img.max()
    return img / peak if peak > 0 else img


def random_ellipse_phantom(
    grid: ImageGrid,
    rng: np.random.Generator,
    n_ellipses_range: tuple[int, int] = (3, 8),
    body_value: tuple[float, float] = (0.4, 0.6),
    increment: tuple[float, float] = (-0.3, 0.4),
) -> np.ndarray:
    """Body outline plus random interior ellipses, clamped to [0, 1].

    The body is a centered ellipse filling most of the field; interior
    ellipses are placed so that their centers lie inside it.
    """
    lo, hi = n_ellipses_range
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid n_ellipses_range {n_ellipses_range}")
    body_a = rng.uniform(0.7, 0.9)
    body_b = rng.uniform(0.55, 0.8)
    body = Ellipse(rng.uniform(*body_value), body_a, body_b, 0.0, 0.0, rng.uniform(-0.3, 0.3))
    ellipses = [body]
    for _ in range(int(rng.integers(lo, hi + 1))):
        rho = np.sqrt(rng.uniform()) * 0.7
        ang = rng.uniform(0, 2 * np.pi)
        ellipses.append(
            Ellipse(
                value=rng.uniform(*increment),
                a=rng.uniform(0.04, 0.3),
                b=rng.uniform(0.04, 0.3),
                x0=rho * body_a * np.cos(ang),
                y0=rho * body_b * np.sin(ang),
                phi=rng.uniform(0, np.pi),
            )
        )
    img = render(ellipses, grid, clip_max=1.0)
    # interior ellipses must not leak outside the body outline
    x, y = grid.pixel_centers()
    half = 0.5 * max(grid.extent)
    img[~body.mask(x / half, y / half)] = 0.0
    return img
