"""Image grid, flat-detector fan-beam geometry and the matched projector pair.

Rays are traced with an exact-intersection (Siddon-style) traversal from the
source to the center of each detector cell. The per-ray weights are stored in
a sparse matrix so that the back-projector is the exact transpose of the
forward projector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np
import scipy.sparse as sp

DENSE_ENTRY_CAP = 10_000_000


class GeometryError(ValueError):
    """Raised for invalid or mutually inconsistent geometry/grid inputs."""


@dataclass(frozen=True)
class ImageGrid:
    nx: int
    ny: int
    pixel_size: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise GeometryError(f"grid needs nx, ny >= 1, got {self.nx}x{self.ny}")
        if not self.pixel_size > 0:
            raise GeometryError(f"pixel_size must be > 0, got {self.pixel_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def extent(self) -> tuple[float, float]:
        return (self.nx * self.pixel_size, self.ny * self.pixel_size)

    @property
    def radius(self) -> float:
        """Radius of the circle circumscribing the grid."""
        w, h = self.extent
        return 0.5 * math.hypot(w, h)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical (x, y) of every pixel center, each of shape (ny, nx).

        Column index grows with x, row index grows with decreasing y, so row 0
        is the top of the image.
        """
        xs = (np.arange(self.nx) - (self.nx - 1) / 2.0) * self.pixel_size
        ys = ((self.ny - 1) / 2.0 - np.arange(self.ny)) * self.pixel_size
        return np.meshgrid(xs, ys)


@dataclass(frozen=True)
class FanBeamGeometry:
    """Fan beam with a flat, equispaced detector centered on the central ray.

    At view angle ``theta`` the source sits at ``sad * (cos theta, sin theta)``
    and the detector row runs along ``(-sin theta, cos theta)`` on the far side
    of the rotation axis.
    """

    n_angles: int
    n_det: int
    det_spacing: float
    sad: float
    sdd: float
    angles: np.ndarray = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.n_angles < 1 or self.n_det < 1:
            raise GeometryError("n_angles and n_det must be >= 1")
        if not self.det_spacing > 0:
            raise GeometryError("det_spacing must be > 0")
        if not self.sad > 0 or self.sdd < self.sad:
            raise GeometryError(f"need sad > 0 and sdd >= sad, got sad={self.sad}, sdd={self.sdd}")
        if self.angles is None:
            angles = 2.0 * np.pi * np.arange(self.n_angles) / self.n_angles
        else:
            angles = np.asarray(self.angles, dtype=np.float64)
            if angles.shape != (self.n_angles,):
                raise GeometryError("angles must have length n_angles")
        object.__setattr__(self, "angles", angles)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_det)

    @property
    def n_rays(self) -> int:
        return self.n_angles * self.n_det

    def det_offsets(self) -> np.ndarray:
        """Detector cell center coordinates along the detector row (mm)."""
        return (np.arange(self.n_det) - (self.n_det - 1) / 2.0) * self.det_spacing

    @property
    def fov_radius(self) -> float:
        """Radius of the disk seen by every view."""
        half = 0.5 * self.n_det * self.det_spacing
        return self.sad * math.sin(math.atan2(half, self.sdd))

    def ray_endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Source and detector-cell positions, each of shape (n_angles, n_det, 2)."""
        c, s = np.cos(self.angles), np.sin(self.angles)
        src = np.stack([self.sad * c, self.sad * s], axis=-1)
        u = self.det_offsets()
        back = self.sdd - self.sad
        det_x = -back * c[:, None] - s[:, None] * u[None, :]
        det_y = -back * s[:, None] + c[:, None] * u[None, :]
        det = np.stack([det_x, det_y], axis=-1)
        src = np.broadcast_to(src[:, None, :], det.shape)
        return np.ascontiguousarray(src), det

    def to_dict(self) -> dict:
        return {
            "n_angles": self.n_angles,
            "n_det": self.n_det,
            "det_spacing_mm": self.det_spacing,
            "sad_mm": self.sad,
            "sdd_mm": self.sdd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FanBeamGeometry":
        return cls(
            n_angles=int(d["n_angles"]),
            n_det=int(d["n_det"]),
            det_spacing=float(d["det_spacing_mm"]),
            sad=float(d["sad_mm"]),
            sdd=float(d["sdd_mm"]),
        )


def check_coverage(geometry: FanBeamGeometry, grid: ImageGrid) -> None:
    """Reject grids whose corners leave the fan for some view."""
    if grid.radius > geometry.fov_radius * (1 + 1e-12):
        raise GeometryError(
            f"grid radius {grid.radius:.3f} mm exceeds detector field of view "
            f"{geometry.fov_radius:.3f} mm; rays would truncate the object"
        )


@numba.njit(cache=True)
def _trace_ray(sx, sy, dx, dy, nx, ny, ps, out_idx, out_len):
    """Intersect segment source->detector with the pixel grid.

    Writes (flat pixel index, chord length) pairs to the output buffers and
    returns how many were written.
    """
    x0 = -0.5 * nx * ps
    y0 = -0.5 * ny * ps
    x1 = -x0
    y1 = -y0
    vx = dx - sx
    vy = dy - sy
    length = math.sqrt(vx * vx + vy * vy)
    eps = 1e-14 * length

    amin = 0.0
    amax = 1.0
    if abs(vx) > eps:
        a_lo = (x0 - sx) / vx
        a_hi = (x1 - sx) / vx
        if a_lo > a_hi:
            a_lo, a_hi = a_hi, a_lo
        amin = max(amin, a_lo)
        amax = min(amax, a_hi)
    elif sx <= x0 or sx >= x1:
        return 0
    if abs(vy) > eps:
        a_lo = (y0 - sy) / vy
        a_hi = (y1 - sy) / vy
        if a_lo > a_hi:
            a_lo, a_hi = a_hi, a_lo
        amin = max(amin, a_lo)
        amax = min(amax, a_hi)
    elif sy <= y0 or sy >= y1:
        return 0
    if amax <= amin:
        return 0

    # Parametric crossings of interior grid lines, merged with the endpoints.
    na = 0
    alphas = np.empty(nx + ny + 4)
    alphas[na] = amin
    na += 1
    alphas[na] = amax
    na += 1
    if abs(vx) > eps:
        for i in range(1, nx):
            a = (x0 + i * ps - sx) / vx
            if amin < a < amax:
                alphas[na] = a
                na += 1
    if abs(vy) > eps:
        for j in range(1, ny):
            a = (y0 + j * ps - sy) / vy
            if amin < a < amax:
                alphas[na] = a
                na += 1
    a_sorted = np.sort(alphas[:na])

    n = 0
    for k in range(na - 1):
        seg = (a_sorted[k + 1] - a_sorted[k]) * length
        if seg <= 0.0:
            continue
        am = 0.5 * (a_sorted[k] + a_sorted[k + 1])
        px = sx + am * vx
        py = sy + am * vy
        col = int(math.floor((px - x0) / ps))
        row = int(math.floor((y1 - py) / ps))
        if col < 0 or col >= nx or row < 0 or row >= ny:
            continue
        out_idx[n] = row * nx + col
        out_len[n] = seg
        n += 1
    return n


@numba.njit(cache=True)
def _siddon_csr(src, det, nx, ny, ps):
    n_rays = src.shape[0]
    per_ray = nx + ny + 3
    idx_buf = np.empty(per_ray, dtype=np.int64)
    len_buf = np.empty(per_ray)
    counts = np.zeros(n_rays + 1, dtype=np.int64)
    for r in range(n_rays):
        counts[r + 1] = _trace_ray(src[r, 0], src[r, 1], det[r, 0], det[r, 1], nx, ny, ps, idx_buf, len_buf)
    indptr = np.cumsum(counts)
    indices = np.empty(indptr[-1], dtype=np.int64)
    data = np.empty(indptr[-1])
    for r in range(n_rays):
        n = _trace_ray(src[r, 0], src[r, 1], det[r, 0], det[r, 1], nx, ny, ps, idx_buf, len_buf)
        start = indptr[r]
        for k in range(n):
            indices[start + k] = idx_buf[k]
            data[start + k] = len_buf[k]
    return indptr, indices, data


def _geometry_key(geometry: FanBeamGeometry, grid: ImageGrid):
    return (
        geometry.n_angles,
        geometry.n_det,
        geometry.det_spacing,
        geometry.sad,
        geometry.sdd,
        geometry.angles.tobytes(),
        grid,
    )


@lru_cache(maxsize=8)
def _cached_matrix(key) -> sp.csr_matrix:
    n_angles, n_det, det_spacing, sad, sdd, angle_bytes, grid = key
    geometry = FanBeamGeometry(n_angles, n_det, det_spacing, sad, sdd, np.frombuffer(angle_bytes))
    src, det = geometry.ray_endpoints()
    indptr, indices, data = _siddon_csr(
        src.reshape(-1, 2), det.reshape(-1, 2), grid.nx, grid.ny, float(grid.pixel_size)
    )
    mat = sp.csr_matrix((data, indices, indptr), shape=(geometry.n_rays, grid.n_pixels))
    mat.sort_indices()
    return mat


def system_matrix(geometry: FanBeamGeometry, grid: ImageGrid) -> sp.csr_matrix:
    """Sparse ray-pixel intersection-length matrix (n_rays x n_pixels), cached."""
    check_coverage(geometry, grid)
    return _cached_matrix(_geometry_key(geometry, grid))


class Projector:
    """Matched forward/back projection pair for one geometry and grid."""

    def __init__(self, geometry: FanBeamGeometry, grid: ImageGrid):
        self.geometry = geometry
        self.grid = grid
        self.matrix = system_matrix(geometry, grid)
        self._matrix_t = self.matrix.T.tocsr()
        self._denominator = None

    def forward(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.grid.shape:
            raise GeometryError(f"image shape {image.shape} does not match grid {self.grid.shape}")
        return (self.matrix @ image.ravel()).reshape(self.geometry.shape)

    def back(self, sino: np.ndarray) -> np.ndarray:
        sino = np.asarray(sino, dtype=np.float64)
        if sino.shape != self.geometry.shape:
            raise GeometryError(f"sinogram shape {sino.shape} does not match geometry {self.geometry.shape}")
        return (self._matrix_t @ sino.ravel()).reshape(self.grid.shape)

    def sqs_denominator(self) -> np.ndarray:
        if self._denominator is None:
            self._denominator = self.back(self.forward(np.ones(self.grid.shape)))
        return self._denominator


def forward_project(image: np.ndarray, geometry: FanBeamGeometry, grid: ImageGrid) -> np.ndarray:
    """Line integrals ``A x`` with shape (n_angles, n_det)."""
    return Projector(geometry, grid).forward(image)


def back_project(sino: np.ndarray, geometry: FanBeamGeometry, grid: ImageGrid) -> np.ndarray:
    """Exact transpose ``A^T s`` of :func:`forward_project`."""
    return Projector(geometry, grid).back(sino)


def sqs_denominator(geometry: FanBeamGeometry, grid: ImageGrid) -> np.ndarray:
    """Per-pixel SQS denominator ``A^T A 1``."""
    return Projector(geometry, grid).sqs_denominator()


def build_dense_matrix(geometry: FanBeamGeometry, grid: ImageGrid, cap: int = DENSE_ENTRY_CAP) -> np.ndarray:
    """Dense system matrix whose column j is the projection of unit pixel j.

    Built column by column through :func:`forward_project`; intended as a test
    oracle for small problems only.
    """
    n_entries = geometry.n_rays * grid.n_pixels
    if n_entries > cap:
        raise GeometryError(f"dense matrix would have {n_entries} entries, cap is {cap}")
    proj = Projector(geometry, grid)
    dense = np.zeros((geometry.n_rays, grid.n_pixels))
    unit = np.zeros(grid.shape)
    flat = unit.reshape(-1)
    for j in range(grid.n_pixels):
        flat[j] = 1.0
        dense[:, j] = proj.forward(unit).ravel()
        flat[j] = 0.0
    return dense
