"""Sparse displacement observations via differentiable cost-volume search.

For each keypoint p the cost block holds c(delta) = -||f_fix(p) - f_mov(p+delta)||^2
over all integer offsets in [-r, r]^3; a temperature softargmax turns the block
into a sub-voxel displacement plus a peakedness confidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import constant
from .autodiff import ops
from .errors import InvalidInputError
from .features import FeaturePyramid, sample_features
from .volume import sample_channels


@dataclass
class ObservationSet:
    """Keypoint positions with measured displacements at one pyramid level.

    points: (N,3) level-l voxel coords on the fixed grid; displacements: (N,3)
    voxel units fixed->moving (residual at that level); peakedness in [0,1].
    """

    points: np.ndarray
    displacements: np.ndarray
    peakedness: np.ndarray
    level: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, np.float64).reshape(-1, 3)
        self.displacements = np.asarray(self.displacements, np.float64).reshape(-1, 3)
        self.peakedness = np.asarray(self.peakedness, np.float64).reshape(-1)
        if not (len(self.points) == len(self.displacements) == len(self.peakedness)):
            raise InvalidInputError("observation arrays disagree in length")
        for arr in (self.points, self.displacements, self.peakedness):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError("non-finite observation data")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, level: int = 0) -> "ObservationSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), level)


def displacement_offsets(radius: int) -> np.ndarray:
    """All integer (dz,dy,dx) in [-r, r]^3 in C order, shape ((2r+1)^3, 3)."""
    if radius < 1:
        raise InvalidInputError(f"radius must be >= 1, got {radius}")
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    zz, yy, xx = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)


def _check_radius(dims, radius: int) -> None:
    if radius >= min(dims):
        raise InvalidInputError(f"search radius {radius} does not fit level dims {tuple(dims)}")


def cost_volume(fix_feat: FeaturePyramid, mov_feat: FeaturePyramid, level: int, pts, radius: int) -> np.ndarray:
    """(N, (2r+1)^3) cost blocks; row order matches displacement_offsets."""
    offs = displacement_offsets(radius)
    fix_lvl = fix_feat.level(level)
    _check_radius(fix_lvl.dims, radius)
    pts = np.asarray(pts, np.float64).reshape(-1, 3)
    a = sample_features(fix_feat, level, pts).astype(np.float64)  # (N, C)
    shifted = (pts[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    b = sample_channels(mov_feat.level(level).data, shifted).astype(np.float64)  # (N*M, C)
    diff = b.reshape(len(pts), len(offs), -1) - a[:, None, :]
    return -(diff * diff).sum(-1)


def soft_correspondence(costs: np.ndarray, radius: int, tau: float = 0.1):
    """Softargmax displacement expectation and its peak probability per point."""
    if tau <= 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    offs = displacement_offsets(radius)
    if costs.shape[-1] != len(offs):
        raise InvalidInputError(f"cost block width {costs.shape[-1]} does not match radius {radius}")
    p = ops.softmax_forward(np.asarray(costs, np.float64) / tau)
    return p @ offs, p.max(-1)


def local_soft_correspondence(costs: np.ndarray, radius: int, tau: float = 0.1,
                              window: int = 1):
    """Softargmax restricted to the argmax's neighborhood, per row.

    The global expectation drags toward secondary modes anywhere in the search
    window; limiting the mass to offsets within `window` of the best cell keeps
    the subvoxel interpolation while dropping that bias. Rows keep their full
    subvoxel range because the window always brackets the argmax.
    """
    if tau <= 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    offs = displacement_offsets(radius)
    if costs.shape[-1] != len(offs):
        raise InvalidInputError(f"cost block width {costs.shape[-1]} does not match radius {radius}")
    c = np.asarray(costs, np.float64) / tau
    best = offs[c.argmax(-1)]
    near = np.abs(offs[None, :, :] - best[:, None, :]).max(-1) <= window
    p = ops.softmax_forward(np.where(near, c, -np.inf))
    return p @ offs, p.max(-1)


def observe(fix_feat: FeaturePyramid, mov_feat: FeaturePyramid, level: int, pts,
            radius: int = 3, tau: float = 0.1) -> ObservationSet:
    """Measure residual displacements at keypoints between fixed features and
    the (already warped) moving features of the same level."""
    pts = np.asarray(pts, np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return ObservationSet.empty(level)
    costs = cost_volume(fix_feat, mov_feat, level, pts, radius)
    disp, peak = soft_correspondence(costs, radius, tau)
    return ObservationSet(pts, disp, peak, level)


def cost_volume_graph(fix_node, mov_node, pts, radius: int):
    """Graph-path cost blocks: differentiable w.r.t. both feature volumes."""
    offs = displacement_offsets(radius)
    pts = np.asarray(pts, np.float64).reshape(-1, 3)
    _check_radius(fix_node.shape[1:], radius)
    n, m = len(pts), len(offs)
    a = ops.trilinear_gather(fix_node, pts)
    a_rep = ops.gather_rows(a, np.repeat(np.arange(n), m))
    shifted = (pts[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    b = ops.trilinear_gather(mov_node, shifted)
    diff = ops.sub(b, a_rep)
    cost = ops.mul(ops.reduce_sum(ops.square(diff), axis=-1), -1.0)
    return ops.reshape(cost, (n, m))


def soft_correspondence_graph(cost_node, radius: int, tau: float = 0.1):
    """Graph-path softargmax: (N,3) displacement node plus peakedness array."""
    if tau <= 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    offs = displacement_offsets(radius)
    p = ops.softmax(ops.mul(cost_node, 1.0 / tau))
    disp = ops.dense(p, constant(offs, like=p))
    return disp, np.asarray(p.value).max(-1)
