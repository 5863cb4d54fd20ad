"""Exact k-nearest-neighbor search with (distance, index) tie ordering."""

from __future__ import annotations

import numpy as np

from ..errors import EmptyObservationsError, InvalidInputError


def knn(queries: np.ndarray, points: np.ndarray, k: int, chunk: int = 1024):
    """K nearest observation points per query, Euclidean, exact.

    Returns (idx (Q, K_eff) int64, dist (Q, K_eff) float64) rows sorted
    ascending with ties broken by lower point index. K_eff = min(k, len(points)).
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    pts = np.asarray(points, np.float64).reshape(-1, 3)
    q = np.asarray(queries, np.float64).reshape(-1, 3)
    m = len(pts)
    if m == 0:
        raise EmptyObservationsError("knn requires at least one observation")
    keff = min(k, m)
    idx_out = np.empty((len(q), keff), np.int64)
    dist_out = np.empty((len(q), keff), np.float64)
    for s in range(0, len(q), chunk):
        sl = slice(s, min(s + chunk, len(q)))
        diff = q[sl][:, None, :] - pts[None, :, :]
        d = np.sqrt((diff * diff).sum(-1))
        if keff == m:
            order = np.argsort(d, axis=1, kind="stable")
            idx_out[sl] = order
            dist_out[sl] = np.take_along_axis(d, order, axis=1)
            continue
        part = np.sort(np.argpartition(d, keff - 1, axis=1)[:, :keff], axis=1)
        dsel = np.take_along_axis(d, part, axis=1)
        # stable sort of index-sorted candidates realizes the (distance, index) order
        order = np.argsort(dsel, axis=1, kind="stable")
        sel_idx = np.take_along_axis(part, order, axis=1)
        sel_d = np.take_along_axis(dsel, order, axis=1)
        # rows where distances tie across the partition boundary need exact handling
        boundary = (d <= sel_d[:, -1][:, None]).sum(1) > keff
        for r in np.flatnonzero(boundary):
            row = d[r]
            cand = np.flatnonzero(row <= sel_d[r, -1])
            take = cand[np.lexsort((cand, row[cand]))][:keff]
            sel_idx[r] = take
            sel_d[r] = row[take]
        idx_out[sl] = sel_idx
        dist_out[sl] = sel_d
    return idx_out, dist_out
