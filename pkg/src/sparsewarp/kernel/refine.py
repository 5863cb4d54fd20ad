"""Localized field updates from user-supplied correspondences.

A new observation u can only alter queries whose K-th neighbor is farther
than u; exactly those rows get their neighborhood, scores, weights and
reconstruction recomputed, and the result matches a full re-evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..correspondence import ObservationSet
from ..errors import InvalidInputError
from ..features import FeaturePyramid, sample_features
from ..volume import DisplacementField
from .field import AttentionStore, field_from_store, kernel_weights, reconstruct
from .model import ES_OUT, SCORE_CLIP, KernelModel, ef_fast, es_fast, normalize_coords, spatial_bias


@dataclass
class RefineResult:
    """changed: flat eval-grid indices recomputed by this update."""

    changed: np.ndarray
    replaced: bool = False
    replaced_index: int | None = None


class KernelState:
    """Mutable session state at one level: observations plus attention store."""

    def __init__(self, model: KernelModel, fix_feat: FeaturePyramid, obs: ObservationSet, store: AttentionStore):
        self.model = model
        self.fix_feat = fix_feat
        self.obs = ObservationSet(obs.points.copy(), obs.displacements.copy(),
                                  obs.peakedness.copy(), obs.level)
        self.store = store
        self._P = model.params64()

    def field(self, spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
        return field_from_store(self.store, spacing)

    def _new_pair_scores(self, rows: np.ndarray, point: np.ndarray, dist_rows: np.ndarray) -> np.ndarray:
        """Scores a(q, u) for the candidate observation against selected queries.

        Query-side encodings come from the store cache when it has one; only
        the single new observation is encoded here.
        """
        st = self.store
        P = self._P
        # all-rows updates happen while observations are scarcer than K; a
        # slice there avoids copying the cached encodings wholesale
        sel = slice(None) if rows.size == len(st.queries) else rows
        total = spatial_bias(dist_rows)
        if st.variant in ("full", "only_Hs"):
            w1 = P["hs.l0.w"]
            aq = st.hs_q[sel] if st.hs_q is not None else \
                es_fast(P, normalize_coords(st.queries[sel], st.dims)) @ w1[:ES_OUT]
            au = es_fast(P, normalize_coords(point[None], st.dims)) @ w1[ES_OUT:]
            h = np.maximum(aq + au + P["hs.l0.b"], 0.0)
            total += (h @ P["hs.l1.w"])[:, 0] + P["hs.l1.b"][0]
        if st.variant in ("full", "only_Hf"):
            v1 = P["hf.l0.w"]
            bq = st.hf_q[sel] if st.hf_q is not None else \
                ef_fast(P, sample_features(self.fix_feat, st.level, st.queries[sel]).astype(np.float64), st.level) @ v1
            bu = ef_fast(P, sample_features(self.fix_feat, st.level, point[None]).astype(np.float64), st.level) @ v1
            h = np.maximum(bq + bu + P["hf.l0.b"], 0.0)
            total += (h @ P["hf.l1.w"])[:, 0] + P["hf.l1.b"][0]
        return np.clip(total, -SCORE_CLIP, SCORE_CLIP)

    def refine(self, point, disp, peak: float = 1.0) -> RefineResult:
        """Insert (or replace) one correspondence and update only affected queries."""
        st = self.store
        p = np.asarray(point, np.float64).reshape(3)
        d = np.asarray(disp, np.float64).reshape(3)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(d))):
            raise InvalidInputError("non-finite correspondence")
        if np.any(p < 0) or np.any(p > np.asarray(st.dims, np.float64) - 1):
            raise InvalidInputError(f"correspondence point {p.tolist()} outside grid {st.dims}")

        dup = np.flatnonzero((self.obs.points == p).all(axis=1))
        if dup.size:
            j = int(dup[0])
            self.obs.displacements[j] = d
            self.obs.peakedness[j] = float(peak)
            rows = np.flatnonzero((st.idx == j).any(axis=1))
            if rows.size:
                # geometry and scores untouched: same point, new displacement
                st.values[rows] = reconstruct(st.weights[rows], self.obs.displacements, st.idx[rows])
            return RefineResult(rows, replaced=True, replaced_index=j)

        m = len(self.obs)
        d_new = np.sqrt(((st.queries - p) ** 2).sum(axis=-1))
        if m < st.k_config:
            rows = np.arange(len(st.queries))  # every neighborhood grows
        else:
            rows = np.flatnonzero(d_new < st.dist[:, -1])
        self.obs = ObservationSet(
            np.vstack([self.obs.points, p[None]]),
            np.vstack([self.obs.displacements, d[None]]),
            np.append(self.obs.peakedness, float(peak)),
            self.obs.level,
        )
        if rows.size == 0:
            return RefineResult(rows)

        new_scores = self._new_pair_scores(rows, p, d_new[rows])
        cand_d = np.concatenate([st.dist[rows], d_new[rows, None]], axis=1)
        cand_i = np.concatenate([st.idx[rows], np.full((len(rows), 1), m, np.int64)], axis=1)
        cand_s = np.concatenate([st.scores[rows], new_scores[:, None]], axis=1)
        # stable sort by distance keeps the (distance, index) invariant: surviving
        # neighbors are already index-ordered within ties, the new index is largest
        order = np.argsort(cand_d, axis=1, kind="stable")[:, : min(st.k_config, m + 1)]
        nd = np.take_along_axis(cand_d, order, axis=1)
        ni = np.take_along_axis(cand_i, order, axis=1)
        ns = np.take_along_axis(cand_s, order, axis=1)
        if nd.shape[1] != st.dist.shape[1]:
            st.idx, st.dist, st.scores = ni, nd, ns  # rows cover every query here
            st.weights = kernel_weights(st.scores)
            st.values = reconstruct(st.weights, self.obs.displacements, st.idx)
        else:
            st.idx[rows], st.dist[rows], st.scores[rows] = ni, nd, ns
            st.weights[rows] = kernel_weights(ns)
            st.values[rows] = reconstruct(st.weights[rows], self.obs.displacements, st.idx[rows])
        return RefineResult(rows)
