"""3D grid containers, trilinear interpolation, warping, Jacobian analytics, pyramids.

Conventions used across the package:
  - arrays are channel-major float32, shape (C, D, H, W)
  - voxel coordinates are (z, y, x), continuous, with (0,0,0) at the first voxel center
  - displacement fields store (dz, dy, dx) offsets in voxel units of their own grid
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError


@dataclass
class Volume3:
    """Scalar or vector 3D grid with anisotropic spacing.

    data: (C, D, H, W) float32; spacing: (sz, sy, sx) mm per voxel;
    origin: world offset in mm, (z, y, x) order.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise InvalidInputError(f"expected 3D or 4D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("volume contains non-finite values")
        self.data = np.ascontiguousarray(arr)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidInputError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape[1:]

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def scalar(self) -> np.ndarray:
        """(D, H, W) view of a single-channel volume."""
        if self.channels != 1:
            raise InvalidInputError(f"expected 1 channel, volume has {self.channels}")
        return self.data[0]

    def with_data(self, data: np.ndarray) -> "Volume3":
        return Volume3(data, self.spacing, self.origin)


@dataclass
class DisplacementField:
    """Dense vector field on a fixed grid; components in voxel units of that grid."""

    grid: Volume3
    level: int = 0

    def __post_init__(self):
        if self.grid.channels != 3:
            raise InvalidInputError(f"displacement field needs 3 channels, got {self.grid.channels}")

    @property
    def vectors(self) -> np.ndarray:
        """(3, D, H, W) component array (dz, dy, dx)."""
        return self.grid.data

    @property
    def dims(self):
        return self.grid.dims

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0), level: int = 0) -> "DisplacementField":
        return cls(Volume3(np.zeros((3, *dims), np.float32), spacing), level)


@dataclass
class PointSet:
    """Continuous (z, y, x) voxel coordinates tagged with their reference frame."""

    points: np.ndarray
    frame: str = "fixed"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point set contains non-finite coordinates")
        self.points = pts

    def __len__(self):
        return len(self.points)


def _as_points(pts) -> np.ndarray:
    arr = pts.points if isinstance(pts, PointSet) else np.asarray(pts, dtype=np.float64)
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("non-finite coordinate in sample request")
    return arr


def trilinear_sample(vol: Volume3, pts) -> np.ndarray:
    """Sample each channel at continuous (z,y,x) coordinates.

    Out-of-bounds coordinates clamp to the border. Returns (N, C) float32.
    """
    p = _as_points(pts)
    return sample_channels(vol.data, p)


def tri_corners(dims, pts: np.ndarray):
    """Corner bookkeeping for border-clamped trilinear interpolation.

    Returns (low, high, frac, inside): per-axis lower/upper integer corner
    arrays, fractional offsets, and a bool mask of coordinates that were not
    clamped (where d/dcoord is the plain interpolation derivative). All are
    3-element lists/arrays of shape (N,) except inside, shape (N, 3).
    """
    D, H, W = dims
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    low, high, frac = [], [], []
    inside = np.empty((p.shape[0], 3), bool)
    for axis, n in enumerate((D, H, W)):
        c = np.clip(p[:, axis], 0.0, n - 1.0)
        inside[:, axis] = (p[:, axis] > 0.0) & (p[:, axis] < n - 1.0)
        c0 = np.minimum(np.floor(c).astype(np.int64), n - 1 if n == 1 else n - 2)
        low.append(c0)
        high.append(np.minimum(c0 + 1, n - 1))
        frac.append(c - c0)
    return low, high, frac, inside


def sample_channels(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear sampling of a raw (C,D,H,W) array at (N,3) coordinates, border-clamped."""
    C, D, H, W = data.shape
    (z0, y0, x0), (z1, y1, x1), (fz, fy, fx), _ = tri_corners((D, H, W), pts)
    fz, fy, fx = fz.astype(np.float32), fy.astype(np.float32), fx.astype(np.float32)

    flat = data.reshape(C, -1)
    out = np.zeros((fz.shape[0], C), np.float32)
    for cz, wz in ((z0, 1.0 - fz), (z1, fz)):
        for cy, wy in ((y0, 1.0 - fy), (y1, fy)):
            for cx, wx in ((x0, 1.0 - fx), (x1, fx)):
                w = (wz * wy * wx).astype(np.float32)
                idx = (cz * H + cy) * W + cx
                out += w[:, None] * flat[:, idx].T
    return out


def nearest_sample(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Nearest-neighbor sampling of (C,D,H,W) at (N,3) coordinates, border-clamped."""
    C, D, H, W = data.shape
    p = np.asarray(pts, dtype=np.float64)
    z = np.clip(np.rint(p[:, 0]), 0, D - 1).astype(np.int64)
    y = np.clip(np.rint(p[:, 1]), 0, H - 1).astype(np.int64)
    x = np.clip(np.rint(p[:, 2]), 0, W - 1).astype(np.int64)
    idx = (z * H + y) * W + x
    return data.reshape(C, -1)[:, idx].T.astype(np.float32)


def grid_coords(dims) -> np.ndarray:
    """(N, 3) float32 voxel coordinates of every grid point, C order (z slowest)."""
    D, H, W = dims
    zz, yy, xx = np.meshgrid(
        np.arange(D, dtype=np.float32),
        np.arange(H, dtype=np.float32),
        np.arange(W, dtype=np.float32),
        indexing="ij",
    )
    return np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)


def warp(moving: Volume3, disp: DisplacementField, mode: str = "linear") -> Volume3:
    """Resample `moving` at x + φ(x) for every voxel x of the field grid.

    mode "nearest" is for label masks; output inherits the field's grid geometry.
    """
    if mode not in ("linear", "nearest"):
        raise InvalidInputError(f"unknown warp mode {mode!r}")
    dims = disp.dims
    coords = grid_coords(dims).astype(np.float64)
    coords += disp.vectors.reshape(3, -1).T
    sampler = sample_channels if mode == "linear" else nearest_sample
    vals = sampler(moving.data, coords)  # (N, C)
    out = vals.T.reshape(moving.channels, *dims)
    return Volume3(out, disp.grid.spacing, disp.grid.origin)


def jacobian_determinants(disp: DisplacementField) -> np.ndarray:
    """Central-difference Jacobian determinants of x ↦ x + φ(x) at interior voxels.

    Returns (D-2, H-2, W-2) float64.
    """
    D, H, W = disp.dims
    if min(D, H, W) < 3:
        raise InvalidInputError(f"field dims {disp.dims} too small for central differences")
    phi = disp.vectors.astype(np.float64)
    # J[i][j] = d(x_i + phi_i)/d(x_j), derivatives in voxel units
    J = np.empty((3, 3, D - 2, H - 2, W - 2))
    for i in range(3):
        comp = phi[i]
        grads = (
            (comp[2:, 1:-1, 1:-1] - comp[:-2, 1:-1, 1:-1]) * 0.5,
            (comp[1:-1, 2:, 1:-1] - comp[1:-1, :-2, 1:-1]) * 0.5,
            (comp[1:-1, 1:-1, 2:] - comp[1:-1, 1:-1, :-2]) * 0.5,
        )
        for j in range(3):
            J[i, j] = grads[j] + (1.0 if i == j else 0.0)
    det = (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )
    return det


def jacobian_log_std(disp: DisplacementField, mask: np.ndarray | None = None) -> float:
    """Population std of log Jacobian determinants (SDlogJ); dets clamped to ≥1e-6.

    `mask`, if given, selects interior voxels (bool array of the interior shape or
    the full grid shape, borders stripped).
    """
    det = jacobian_determinants(disp)
    if mask is not None:
        m = np.asarray(mask, bool)
        if m.shape == disp.dims:
            m = m[1:-1, 1:-1, 1:-1]
        if m.shape != det.shape:
            raise InvalidInputError(f"mask shape {m.shape} does not match interior {det.shape}")
        det = det[m]
        if det.size == 0:
            raise InvalidInputError("mask selects no interior voxels")
    logs = np.log(np.maximum(det, 1e-6))
    return float(np.std(logs))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps with radius ceil(3σ)."""
    if sigma < 0:
        raise InvalidInputError(f"negative sigma {sigma}")
    if sigma == 0:
        return np.ones(1, np.float32)
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(vol: Volume3, sigma: float) -> Volume3:
    """Separable Gaussian blur with border replication; sigma=0 is the identity."""
    if sigma < 0:
        raise InvalidInputError(f"negative sigma {sigma}")
    if sigma == 0:
        return vol.with_data(vol.data.copy())
    k = gaussian_kernel1d(sigma).astype(np.float64)
    out = vol.data.astype(np.float64)
    for axis in (1, 2, 3):
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return vol.with_data(out.astype(np.float32))


def blur_array(data: np.ndarray, sigma: float) -> np.ndarray:
    """gaussian_blur for raw (...,D,H,W) arrays (blurs the last three axes)."""
    if sigma == 0:
        return data.copy()
    k = gaussian_kernel1d(sigma).astype(np.float64)
    out = data.astype(np.float64)
    for axis in (-3, -2, -1):
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return out.astype(data.dtype if data.dtype == np.float64 else np.float32)


def pyramid_dims(dims, levels: int):
    """Per-level dims, halving with ceil; raises if the coarsest drops below 4."""
    if levels < 1:
        raise InvalidInputError("levels must be >= 1")
    out = [tuple(dims)]
    for _ in range(levels - 1):
        out.append(tuple(int(math.ceil(d / 2)) for d in out[-1]))
    if levels > 1 and min(out[-1]) < 4:
        raise InvalidInputError(
            f"volume {tuple(dims)} too small for {levels} levels (coarsest {out[-1]} < 4); reduce levels"
        )
    return out


def max_levels(dims, cap: int = 8) -> int:
    """Largest level count build_pyramid accepts for these dims."""
    n = 1
    while n < cap:
        try:
            pyramid_dims(dims, n + 1)
        except InvalidInputError:
            break
        n += 1
    return n


def build_pyramid(vol: Volume3, levels: int):
    """Coarse-to-fine image pyramid: level 0 is full res, each level blurs (σ=1) then
    takes every 2nd voxel (ceil dims), doubling spacing."""
    pyramid_dims(vol.dims, levels)  # validate up front
    out = [vol]
    cur = vol
    for _ in range(levels - 1):
        blurred = gaussian_blur(cur, 1.0)
        sub = blurred.data[:, ::2, ::2, ::2]
        cur = Volume3(sub.copy(), tuple(s * 2 for s in cur.spacing), cur.origin)
        out.append(cur)
    return out
