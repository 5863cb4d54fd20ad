"""Dual-stream attention kernel: parameters plus the two scoring paths.

Scores follow a(x,y) = H_s(E_s(x_hat), E_s(y_hat)) + H_f(E_f(x_f) + E_f(y_f)) + b(x,y)
with spatial bias b = 1/(1 + ||x-y||^2). E_s embeds [-1,1]^3-normalized
coordinates, E_f embeds sampled semantic features (per-level input layer,
shared trunk). H_s consumes the concatenated pair, H_f the elementwise sum.

Two implementations share the parameter store: a graph path for training and
a chunked float64 numpy path (split first-layer GEMM over the query/neighbor
halves) for dense inference and refinement.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import ParameterStore, constant, leaf
from ..autodiff import ops
from ..errors import InvalidInputError
from ..features import DEFAULT_PLAN, channel_plan, create_feature_params

HIDDEN = 128
ES_OUT = 64
EF_OUT = 128
HEAD_HIDDEN = 64
SCORE_CLIP = 30.0
VARIANTS = ("full", "only_Hs", "only_Hf", "bias_only")


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


def create_kernel_params(store: ParameterStore, scales: int, plan=DEFAULT_PLAN) -> None:
    """Register attention parameters: E_s, per-level E_f inputs, shared trunk, heads."""
    def dense_pair(name, shape):
        store.create(f"{name}.w", shape)
        store.create(f"{name}.b", (shape[1],), init="zeros")

    dense_pair("es.l0", (3, HIDDEN))
    dense_pair("es.l1", (HIDDEN, HIDDEN))
    dense_pair("es.l2", (HIDDEN, ES_OUT))
    for l, c in enumerate(channel_plan(scales, plan)):
        dense_pair(f"ef.in{l}", (c, HIDDEN))
    dense_pair("ef.l1", (HIDDEN, HIDDEN))
    dense_pair("ef.l2", (HIDDEN, EF_OUT))
    dense_pair("hs.l0", (2 * ES_OUT, HEAD_HIDDEN))
    dense_pair("hs.l1", (HEAD_HIDDEN, 1))
    dense_pair("hf.l0", (EF_OUT, HEAD_HIDDEN))
    dense_pair("hf.l1", (HEAD_HIDDEN, 1))


class KernelModel:
    """Parameter container for the encoder plus kernel; built from a seed."""

    def __init__(self, store: ParameterStore, scales: int = 5, plan=DEFAULT_PLAN):
        self.store = store
        self.scales = int(scales)
        self.plan = tuple(channel_plan(scales, plan))

    @classmethod
    def build(cls, seed: int = 0, scales: int = 5, plan=DEFAULT_PLAN) -> "KernelModel":
        store = ParameterStore(seed)
        create_feature_params(store, scales, plan)
        create_kernel_params(store, scales, plan)
        return cls(store, scales, plan)

    def param_count(self) -> int:
        return self.store.count()

    def kernel_param_count(self) -> int:
        """Attention-side parameters only (E_s, E_f, heads)."""
        return int(sum(a.size for k, a in self.store.items() if k.split(".")[0] in ("es", "ef", "hs", "hf")))

    def params64(self) -> dict:
        """float64 snapshot of all parameters for the fast scoring path."""
        return {k: v.astype(np.float64) for k, v in self.store.items()}


def normalize_coords(pts, dims) -> np.ndarray:
    """Map level voxel coordinates to [-1,1]^3 (axes of extent 1 map to 0)."""
    p = np.asarray(pts, np.float64).reshape(-1, 3)
    out = np.zeros_like(p)
    for axis, d in enumerate(dims):
        if d > 1:
            out[:, axis] = 2.0 * p[:, axis] / (d - 1.0) - 1.0
    return out


def spatial_bias(dist: np.ndarray) -> np.ndarray:
    """b(x,y) = 1 / (1 + ||x-y||^2), distances in level voxel units."""
    d = np.asarray(dist, np.float64)
    return 1.0 / (1.0 + d * d)


def _mlp(x, P, names):
    """relu-separated dense stack, linear output layer."""
    for i, name in enumerate(names):
        x = x @ P[f"{name}.w"] + P[f"{name}.b"]
        if i + 1 < len(names):
            x = np.maximum(x, 0.0)
    return x


def es_fast(P: dict, pts_norm: np.ndarray) -> np.ndarray:
    return _mlp(np.asarray(pts_norm, np.float64), P, ("es.l0", "es.l1", "es.l2"))


def ef_fast(P: dict, feats: np.ndarray, level: int) -> np.ndarray:
    return _mlp(np.asarray(feats, np.float64), P, (f"ef.in{level}", "ef.l1", "ef.l2"))


def pair_scores_fast(P: dict, idx: np.ndarray, dist: np.ndarray, variant: str,
                     es_q=None, es_o=None, ef_q=None, ef_o=None, chunk: int = 16384) -> np.ndarray:
    """Clipped attention scores (Q,K) for neighborhoods given precomputed encodings."""
    check_variant(variant)
    use_hs = variant in ("full", "only_Hs")
    use_hf = variant in ("full", "only_Hf")
    scores = spatial_bias(dist)
    if use_hs:
        W1 = P["hs.l0.w"]
        aq = es_q @ W1[:ES_OUT]
        ao = es_o @ W1[ES_OUT:]
    if use_hf:
        V1 = P["hf.l0.w"]
        bq = ef_q @ V1
        bo = ef_o @ V1
    for s in range(0, idx.shape[0], chunk):
        sl = slice(s, min(s + chunk, idx.shape[0]))
        rows = idx[sl]
        if use_hs:
            h = np.maximum(aq[sl][:, None, :] + ao[rows] + P["hs.l0.b"], 0.0)
            scores[sl] += (h @ P["hs.l1.w"])[..., 0] + P["hs.l1.b"][0]
        if use_hf:
            h = np.maximum(bq[sl][:, None, :] + bo[rows] + P["hf.l0.b"], 0.0)
            scores[sl] += (h @ P["hf.l1.w"])[..., 0] + P["hf.l1.b"][0]
    return np.clip(scores, -SCORE_CLIP, SCORE_CLIP)


def _mlp_graph(x, leaves, names):
    for i, name in enumerate(names):
        x = ops.dense(x, leaves[f"{name}.w"], leaves[f"{name}.b"])
        if i + 1 < len(names):
            x = ops.relu(x)
    return x


def scores_graph(leaves: dict, q_norm: np.ndarray, o_norm: np.ndarray,
                 q_feat_node, o_feat_node, idx: np.ndarray, dist: np.ndarray,
                 level: int, variant: str = "full"):
    """Graph-path attention scores (Q,K) node, differentiable w.r.t. parameters
    and the sampled feature nodes."""
    check_variant(variant)
    Q, K = idx.shape
    rep = np.repeat(np.arange(Q), K)
    nbr = idx.reshape(-1)
    ref = next(iter(leaves.values()))
    total = constant(spatial_bias(dist).reshape(Q, K), like=ref)
    if variant in ("full", "only_Hs"):
        es_q = _mlp_graph(leaf(q_norm, dtype=ref.value.dtype), leaves, ("es.l0", "es.l1", "es.l2"))
        es_o = _mlp_graph(leaf(o_norm, dtype=ref.value.dtype), leaves, ("es.l0", "es.l1", "es.l2"))
        pair = ops.concat([ops.gather_rows(es_q, rep), ops.gather_rows(es_o, nbr)])
        h = ops.relu(ops.dense(pair, leaves["hs.l0.w"], leaves["hs.l0.b"]))
        s = ops.dense(h, leaves["hs.l1.w"], leaves["hs.l1.b"])
        total = ops.add(total, ops.reshape(s, (Q, K)))
    if variant in ("full", "only_Hf"):
        ef_q = _mlp_graph(q_feat_node, leaves, (f"ef.in{level}", "ef.l1", "ef.l2"))
        ef_o = _mlp_graph(o_feat_node, leaves, (f"ef.in{level}", "ef.l1", "ef.l2"))
        summed = ops.add(ops.gather_rows(ef_q, rep), ops.gather_rows(ef_o, nbr))
        h = ops.relu(ops.dense(summed, leaves["hf.l0.w"], leaves["hf.l0.b"]))
        s = ops.dense(h, leaves["hf.l1.w"], leaves["hf.l1.b"])
        total = ops.add(total, ops.reshape(s, (Q, K)))
    return ops.clip(total, -SCORE_CLIP, SCORE_CLIP)
