"""Salient-point detection on the fixed image and count capping.

The detector scores voxels by the Förstner measure on the smoothed structure
tensor; greedy non-max suppression and farthest point sampling keep the set
small and well spread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .volume import Volume3, blur_array


@dataclass
class KeypointSet:
    """Detected points: (N,3) float32 (z,y,x) voxel positions plus scores."""

    positions: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, np.float32).reshape(-1, 3)
        self.scores = np.asarray(self.scores, np.float32).reshape(-1)
        if len(self.positions) != len(self.scores):
            raise InvalidInputError("positions and scores length mismatch")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.scores))):
            raise InvalidInputError("non-finite keypoint data")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls) -> "KeypointSet":
        return cls(np.zeros((0, 3), np.float32), np.zeros(0, np.float32))


def _ball_offsets(radius: int, ndim: int = 3) -> np.ndarray:
    r = int(radius)
    axes = [np.arange(-r, r + 1)] * ndim
    grids = np.meshgrid(*axes, indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=1)
    return offs[(offs ** 2).sum(1) <= r * r]


def _greedy_nms(score: np.ndarray, nms_radius: int, threshold: float, max_points):
    """Accept voxels in score order, suppressing a Euclidean ball around each."""
    coords = np.argwhere(score > threshold)
    if len(coords) == 0:
        return np.zeros((0, score.ndim), np.int64)
    vals = score[tuple(coords.T)]
    order = np.lexsort(tuple(coords.T[::-1]) + (-vals,))
    coords = coords[order]
    offs = _ball_offsets(nms_radius, score.ndim)
    suppressed = np.zeros(score.shape, bool)
    dims = score.shape
    taken = []
    for c in coords:
        if suppressed[tuple(c)]:
            continue
        taken.append(c)
        if max_points is not None and len(taken) >= max_points:
            break
        pts = offs + c
        ok = np.all((pts >= 0) & (pts < dims), axis=1)
        suppressed[tuple(pts[ok].T)] = True
    return np.asarray(taken, np.int64).reshape(-1, score.ndim)


def foerstner_score(vol: Volume3, sigma: float = 1.4) -> np.ndarray:
    """Per-voxel distinctiveness 1/trace(S^-1) of the smoothed structure tensor.

    S = G_sigma * (grad I grad I^T); the score equals det(S)/trace(adj(S)) and is
    zero wherever the tensor is (near) singular, e.g. on constant volumes.
    """
    img = vol.scalar().astype(np.float64)
    gz, gy, gx = np.gradient(img)
    prods = np.stack([gz * gz, gy * gy, gx * gx, gz * gy, gz * gx, gy * gx])
    s_zz, s_yy, s_xx, s_zy, s_zx, s_yx = blur_array(prods, sigma)
    det = (
        s_zz * (s_yy * s_xx - s_yx * s_yx)
        - s_zy * (s_zy * s_xx - s_yx * s_zx)
        + s_zx * (s_zy * s_yx - s_yy * s_zx)
    )
    tr_adj = (s_yy * s_xx - s_yx * s_yx) + (s_zz * s_xx - s_zx * s_zx) + (s_zz * s_yy - s_zy * s_zy)
    score = np.zeros_like(det)
    np.divide(det, tr_adj, out=score, where=tr_adj > 1e-12)
    return np.maximum(score, 0.0)


def foerstner_detect(
    vol: Volume3,
    sigma: float = 1.4,
    nms_radius: int = 3,
    max_points: int | None = None,
    threshold: float = 0.0,
) -> KeypointSet:
    """Detect corner-like points, strongest first; constant volumes yield none."""
    if nms_radius < 1:
        raise InvalidInputError(f"nms_radius must be >= 1, got {nms_radius}")
    score = foerstner_score(vol, sigma)
    taken = _greedy_nms(score, nms_radius, threshold, max_points)
    if len(taken) == 0:
        return KeypointSet.empty()
    return KeypointSet(taken.astype(np.float32), score[tuple(taken.T)].astype(np.float32))


def detect_2d_slices(
    vol: Volume3,
    sigma: float = 1.4,
    nms_radius: int = 3,
    max_points: int | None = None,
    threshold: float = 0.0,
) -> KeypointSet:
    """Alternate detector: 2D structure-tensor corners per axial slice.

    Same interface and ordering contract as foerstner_detect; NMS runs in 3D
    across the stacked per-slice scores so near-duplicate detections on
    adjacent slices collapse.
    """
    img = vol.scalar().astype(np.float64)
    score = np.zeros_like(img)
    for z in range(img.shape[0]):
        gy, gx = np.gradient(img[z])
        prods = np.stack([gy * gy, gx * gx, gy * gx])
        s_yy, s_xx, s_yx = blur_array(prods[:, None], sigma)[:, 0]
        det = s_yy * s_xx - s_yx * s_yx
        tr = s_yy + s_xx
        sl = np.zeros_like(det)
        np.divide(det, tr, out=sl, where=tr > 1e-12)
        score[z] = np.maximum(sl, 0.0)
    taken = _greedy_nms(score, nms_radius, threshold, max_points)
    if len(taken) == 0:
        return KeypointSet.empty()
    return KeypointSet(taken.astype(np.float32), score[tuple(taken.T)].astype(np.float32))


def farthest_point_sample(kps: KeypointSet, n: int, seed: int = 0) -> KeypointSet:
    """Greedy maximin subset of n points, seeded at the highest-score point.

    Fully deterministic: the maximin rule breaks ties by lower index, so `seed`
    only exists for interface stability. Returns the input when it already
    fits the budget.
    """
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    if len(kps) <= n:
        return kps
    pts = kps.positions.astype(np.float64)
    chosen = [int(np.argmax(kps.scores))]
    d = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1))
    idx = np.asarray(chosen)
    return KeypointSet(kps.positions[idx], kps.scores[idx])
