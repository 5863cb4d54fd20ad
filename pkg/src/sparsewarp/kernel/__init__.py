"""Sparse-to-dense reconstruction: attention kernel, KNN, TPS baseline, refinement."""

from .field import (
    AttentionStore,
    confidence_map,
    evaluate_field,
    evaluate_field_graph,
    field_from_store,
    kernel_weights,
    reconstruct,
)
from .model import (
    SCORE_CLIP,
    VARIANTS,
    KernelModel,
    check_variant,
    create_kernel_params,
    normalize_coords,
    pair_scores_fast,
    scores_graph,
    spatial_bias,
)
from .neighborhood import knn
from .refine import KernelState, RefineResult
from .tps import TpsModel, tps_eval, tps_field, tps_fit

__all__ = [
    "AttentionStore", "confidence_map", "evaluate_field", "evaluate_field_graph",
    "field_from_store", "kernel_weights", "reconstruct", "SCORE_CLIP", "VARIANTS",
    "KernelModel", "check_variant", "create_kernel_params", "normalize_coords",
    "pair_scores_fast", "scores_graph", "spatial_bias", "knn", "KernelState",
    "RefineResult", "TpsModel", "tps_eval", "tps_field", "tps_fit",
]
