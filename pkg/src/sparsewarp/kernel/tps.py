"""Thin plate spline baseline: scattered displacement interpolation with U(r)=r."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..correspondence import ObservationSet
from ..errors import EmptyObservationsError, SingularSystemError
from ..volume import DisplacementField, Volume3, grid_coords


@dataclass
class TpsModel:
    """Radial weights + affine part per displacement component; coords centered."""

    control: np.ndarray
    weights: np.ndarray
    affine: np.ndarray
    center: np.ndarray
    lam: float


def _duplicate_indices(pts: np.ndarray):
    """Indices participating in exact duplicate positions, sorted."""
    _, inverse, counts = np.unique(pts, axis=0, return_inverse=True, return_counts=True)
    return np.flatnonzero(counts[inverse] > 1)


def tps_fit(obs, lam: float = 0.0) -> TpsModel:
    """Solve the (K + lam I | P) system in float64; lam=0 interpolates exactly.

    Duplicate control points make the unregularized system singular; they are
    reported up front with their indices.
    """
    if isinstance(obs, ObservationSet):
        pts, vals = obs.points, obs.displacements
    else:
        pts, vals = obs
    pts = np.asarray(pts, np.float64).reshape(-1, 3)
    vals = np.asarray(vals, np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise EmptyObservationsError("tps_fit needs at least one control point")
    dup = _duplicate_indices(pts)
    if lam == 0.0 and len(dup):
        raise SingularSystemError("duplicate control points", indices=dup.tolist())
    center = pts.mean(axis=0)
    c = pts - center
    K = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1)) + lam * np.eye(n)
    P = np.hstack([np.ones((n, 1)), c])
    A = np.zeros((n + 4, n + 4))
    A[:n, :n] = K
    A[:n, n:] = P
    A[n:, :n] = P.T
    rhs = np.zeros((n + 4, 3))
    rhs[:n] = vals
    try:
        sol = np.linalg.solve(A, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        if len(dup):
            raise SingularSystemError("duplicate control points", indices=dup.tolist()) from None
        # degenerate geometry (few or coplanar points): minimum-norm fit
        sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    residual = np.abs(A[:n] @ sol - rhs[:n]).max(initial=0.0)
    if lam == 0.0 and residual > 1e-6 * max(1.0, np.abs(vals).max(initial=0.0)):
        raise SingularSystemError(
            f"system not solvable to interpolation accuracy (residual {residual:.2e})",
            indices=dup.tolist(),
        )
    return TpsModel(pts.copy(), sol[:n], sol[n:], center, float(lam))


def tps_eval(model: TpsModel, pts, chunk: int = 16384) -> np.ndarray:
    """Evaluate the spline displacement at (N,3) voxel coordinates."""
    pts = np.asarray(pts, np.float64).reshape(-1, 3)
    ctrl = model.control - model.center
    out = np.empty((len(pts), 3))
    for s in range(0, len(pts), chunk):
        sl = slice(s, min(s + chunk, len(pts)))
        p = pts[sl] - model.center
        r = np.sqrt(((p[:, None, :] - ctrl[None]) ** 2).sum(-1))
        out[sl] = r @ model.weights + np.hstack([np.ones((len(p), 1)), p]) @ model.affine
    return out


def tps_field(obs, dims, lam: float = 0.0, spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
    """Dense TPS displacement field on a level grid."""
    model = tps_fit(obs, lam)
    vals = tps_eval(model, grid_coords(dims).astype(np.float64))
    return DisplacementField(Volume3(vals.T.reshape(3, *dims).astype(np.float32), spacing))
