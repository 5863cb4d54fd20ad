"""Coarse-to-fine registration driver and the desk-scale training loop.

register() runs the numpy inference path: detect keypoints on the fixed image
once, then per level (coarsest first) warp the moving image by the field so
far, re-encode it, measure residual correspondences at the scaled keypoints,
reconstruct a dense residual and compose additively. train() runs the graph
path per level with gradients flowing through the encoder, the cost-volume
softargmax, the attention kernel and the warp itself.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .autodiff.engine import Node, backward, constant
from .autodiff.losses import diffusion_loss, dice_loss, landmark_loss, mse_loss, ncc_loss
from .autodiff.optim import Adam
from .autodiff import ops
from .correspondence import (
    ObservationSet,
    cost_volume,
    cost_volume_graph,
    displacement_offsets,
    local_soft_correspondence,
    soft_correspondence,
    soft_correspondence_graph,
)
from .errors import EmptyObservationsError, InvalidInputError
from .features import FeaturePyramid, encode, encode_graph
from .kernel.field import AttentionStore, confidence_map, evaluate_field, evaluate_field_graph
from .kernel.model import KernelModel, VARIANTS
from .kernel.tps import tps_field
from .keypoints import KeypointSet, farthest_point_sample, foerstner_detect
from .volume import (
    DisplacementField,
    Volume3,
    blur_array,
    build_pyramid,
    grid_coords,
    max_levels,
    pyramid_dims,
    sample_channels,
    warp,
)

# "tps" replaces the attention kernel with a thin-plate-spline fit of the same
# observations; everything upstream of the reconstruction is unchanged.
PIPELINE_VARIANTS = tuple(VARIANTS) + ("tps",)


@dataclass
class RegistrationConfig:
    """Knobs shared by register() and train().

    radius may be an int or a per-level sequence (finest first). stride > 1
    evaluates the kernel on a strided grid and interpolates between nodes,
    which only matters at the finest levels.
    """

    scales: int = 5
    variant: str = "full"
    k: int = 30
    radius: int | tuple = 3
    tau: float = 0.05
    max_keypoints: int = 512
    detect_sigma: float = 1.4
    nms_radius: int = 3
    stride: int = 1
    feature_norm: bool = True
    min_observations: int = 4
    peak_gate: float = 0.6
    peak_gate_fine: float = 0.9
    fb_tol: float = 0.5
    seed: int = 0
    # training
    epochs: int = 10
    lr: float = 1e-3
    image_loss: str = "ncc"  # ncc | mse | none
    ncc_window: int = 7
    use_diffusion: bool = True
    use_dice: bool = False
    use_landmark: bool = False
    use_sharpness: bool = True
    use_correspondence: bool = True
    train_levels: tuple | None = None
    train_keypoints: int = 64
    train_stride: int = 3
    augment: bool = True
    patience: int = 3

    def __post_init__(self):
        if self.scales < 1:
            raise InvalidInputError(f"scales must be >= 1, got {self.scales}")
        if self.variant not in PIPELINE_VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}; expected one of {PIPELINE_VARIANTS}")
        if self.image_loss not in ("ncc", "mse", "none"):
            raise InvalidInputError(f"image_loss must be ncc, mse or none, got {self.image_loss!r}")

    def radius_at(self, level: int) -> int:
        if np.isscalar(self.radius):
            return int(self.radius)
        r = tuple(self.radius)
        return int(r[level]) if level < len(r) else int(r[-1])


@dataclass
class RegistrationResult:
    """Final field plus the per-level evidence that produced it.

    prior is the field entering the finest level (before its residual), and
    store the finest-level attention state; together they let a session refit
    the finest residual interactively without redoing the coarse levels.
    """

    field: DisplacementField
    observations: dict
    residual_norms: dict
    confidence: Volume3
    keypoints: KeypointSet
    store: AttentionStore | None
    prior: np.ndarray
    scales: int
    timing: dict


@dataclass
class TrainResult:
    step_losses: list
    epoch_losses: list
    val_scores: list
    best_epoch: int
    aborted: bool = False


def _check_pair(moving: Volume3, fixed: Volume3) -> None:
    if moving.channels != 1 or fixed.channels != 1:
        raise InvalidInputError(
            f"registration expects single-channel volumes, got {moving.channels} and {fixed.channels}")
    if moving.dims != fixed.dims:
        raise InvalidInputError(f"moving dims {moving.dims} != fixed dims {fixed.dims}")


def _effective_scales(dims, model: KernelModel, cfg: RegistrationConfig) -> int:
    scales = min(cfg.scales, model.scales, max_levels(dims))
    if scales < cfg.scales:
        warnings.warn(f"scales clamped from {cfg.scales} to {scales} for dims {tuple(dims)}")
    return scales


def _upsample_vectors(arr: np.ndarray, dims, factor: float) -> np.ndarray:
    """Resample a coarse (3,d,h,w) field onto `dims`, rescaling magnitudes."""
    pts = grid_coords(dims).astype(np.float64) / factor
    out = sample_channels(arr, pts) * factor  # (N, 3)
    return np.ascontiguousarray(out.T.reshape(3, *dims).astype(np.float32))


def _fit_radius(radius: int, dims) -> int:
    """Largest search radius whose window fits the level grid."""
    return max(1, min(int(radius), (min(dims) - 1) // 2))


def _level_points(kps: KeypointSet, level: int, dims_l, margin: int) -> np.ndarray:
    """Keypoint coordinates on the level grid, deduplicated; points whose
    search window would leave the grid are dropped (border-clamped samples
    produce cost ties the softargmax turns into spurious shifts)."""
    if len(kps) == 0:
        return np.zeros((0, 3), np.float64)
    pts = kps.positions.astype(np.float64) / float(2 ** level)
    hi = np.asarray(dims_l, np.float64) - 1.0 - margin
    keep = np.all((pts >= margin) & (pts <= hi), axis=1)
    return np.unique(pts[keep], axis=0)


# Cost rows are scaled to unit spread before the softargmax so the sharpness
# of a match depends on the shape of the local cost landscape, not on the
# magnitude of the feature activations (which is arbitrary before training).
# Rows with spread below the float32 noise floor count as flat and fall back
# to a uniform distribution, whose expected offset is exactly zero.
_FLAT_SPREAD = 1e-6

# A softargmax expectation is only a subvoxel refinement of the discrete peak
# when the two agree; rows where mass leaks along near-tied directions move
# the expectation away from the argmax and are dropped. The peak gate removes
# ambiguous rows outright: a two-way tie tops out near 0.5, a genuine match
# concentrates most of the mass on one offset. A sub-voxel residual dropped
# here doubles at the next finer level, where it resolves as an integer shift.
# The two finest levels carry the largest grids and the least reliable
# features before training, so the default gate there is stricter; trained
# models warrant lower gates (config fields), since peak height then mostly
# throttles how many equally good rows survive.
_CONSISTENCY_TOL = 0.75


def _cost_scale(costs: np.ndarray) -> np.ndarray:
    """Per-row 1/spread normalizers, zero for flat rows; shift-invariant."""
    spread = costs.max(-1, keepdims=True) - costs.mean(-1, keepdims=True)
    flat = spread < _FLAT_SPREAD
    return np.where(flat, 0.0, 1.0 / np.where(flat, 1.0, spread))


def _consistent_rows(costs: np.ndarray, disp: np.ndarray, peak: np.ndarray,
                     radius: int, level: int, cfg: RegistrationConfig) -> np.ndarray:
    """Mask of rows with a dominant peak and an expectation that refines it."""
    offs = displacement_offsets(radius)
    best = offs[costs.argmax(-1)]
    gate = cfg.peak_gate_fine if level <= 1 else cfg.peak_gate
    return (np.abs(disp - best).max(-1) <= _CONSISTENCY_TOL) & (peak >= gate)


def _observe(fix_feat, mov_feat, level: int, pts, radius: int,
             cfg: RegistrationConfig) -> ObservationSet:
    """Residual correspondences from spread-normalized cost rows; ambiguous
    rows are discarded rather than averaged into the field."""
    pts = np.asarray(pts, np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return ObservationSet.empty(level)
    costs = cost_volume(fix_feat, mov_feat, level, pts, radius)
    scaled = costs * _cost_scale(costs)
    disp, peak = soft_correspondence(scaled, radius, cfg.tau)
    keep = _consistent_rows(costs, disp, peak, radius, level, cfg)
    # probe the reverse direction at the same points: averaging the two
    # one-sided estimates cancels the content-driven half of the subvoxel
    # drift, and a self-match lands on exactly zero
    back = cost_volume(mov_feat, fix_feat, level, pts, radius)
    bscaled = back * _cost_scale(back)
    bdisp, bpeak = soft_correspondence(bscaled, radius, cfg.tau)
    keep &= _consistent_rows(back, bdisp, bpeak, radius, level, cfg)
    # the global expectations above detect multi-modal rows; the recorded
    # displacement interpolates around each direction's winning cell only
    fwd, _ = local_soft_correspondence(scaled, radius, cfg.tau)
    bwd, _ = local_soft_correspondence(bscaled, radius, cfg.tau)
    # cycle check: a match only one direction sees (flat texture, occlusion)
    # would enter the average as half its value, so discard the row instead
    keep &= np.abs(fwd + bwd).max(-1) <= cfg.fb_tol
    return ObservationSet(pts[keep], (0.5 * (fwd - bwd))[keep],
                          np.minimum(peak, bpeak)[keep], level)


def _unit_features(pyr: FeaturePyramid) -> FeaturePyramid:
    """Per-voxel L2 normalization so match costs compare feature direction,
    not the (training-dependent) activation magnitude. The epsilon sits under
    the square root so near-silent voxels fade to zero instead of being blown
    up into unit-length noise; must mirror _unit_features_node exactly."""
    out = []
    for lvl in pyr.levels:
        norm = np.sqrt((lvl.data.astype(np.float64) ** 2).sum(0, keepdims=True) + 1e-8)
        out.append(lvl.with_data((lvl.data / norm).astype(np.float32)))
    return FeaturePyramid(out)


def _unit_features_node(node: Node) -> Node:
    """Graph-path per-voxel L2 normalization of a (C,D,H,W) feature node."""
    c = node.shape[0]
    n = int(np.prod(node.shape[1:]))
    flat = ops.transpose2(ops.reshape(node, (c, n)))  # (N, C)
    sq = ops.reshape(ops.reduce_sum(ops.square(flat), axis=-1), (n, 1))
    inv = ops.div(constant(np.ones((n, 1), node.value.dtype)), ops.sqrt(ops.add(sq, 1e-8)))
    scaled = ops.mul(flat, ops.dense(inv, constant(np.ones((1, c), node.value.dtype))))
    return ops.reshape(ops.transpose2(scaled), node.shape)


def register(moving: Volume3, fixed: Volume3, model: KernelModel,
             cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Estimate the displacement field mapping fixed-grid points into `moving`.

    Levels run coarsest to finest; each contributes a residual on top of the
    upsampled prior (phi_l = up(phi_{l+1}) + r_l). A level without
    observations contributes a zero residual and emits a warning.
    """
    cfg = cfg if cfg is not None else RegistrationConfig()
    _check_pair(moving, fixed)
    t_start = time.perf_counter()
    timing: dict = {}
    scales = _effective_scales(fixed.dims, model, cfg)
    dims_all = pyramid_dims(fixed.dims, scales)

    t0 = time.perf_counter()
    fix_feat = encode(fixed, model.store, scales, model.plan)
    if cfg.feature_norm:
        fix_feat = _unit_features(fix_feat)
    timing["encode_fixed"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    kps = foerstner_detect(fixed, cfg.detect_sigma, cfg.nms_radius)
    if len(kps) > cfg.max_keypoints:
        kps = farthest_point_sample(kps, cfg.max_keypoints, cfg.seed)
    timing["detect"] = time.perf_counter() - t0

    phi: np.ndarray | None = None
    observations: dict = {}
    residual_norms: dict = {}
    store0: AttentionStore | None = None
    prior0: np.ndarray | None = None
    for level in range(scales - 1, -1, -1):
        t0 = time.perf_counter()
        dims_l = dims_all[level]
        if phi is None:
            phi = np.zeros((3, *dims_l), np.float32)
        else:
            phi = _upsample_vectors(phi, dims_l, 2.0)
        full = phi if level == 0 else _upsample_vectors(phi, fixed.dims, float(2 ** level))
        mov_w = warp(moving, DisplacementField(Volume3(full, fixed.spacing, fixed.origin)))
        mov_feat = encode(mov_w, model.store, scales, model.plan)
        if cfg.feature_norm:
            mov_feat = _unit_features(mov_feat)
        radius = _fit_radius(cfg.radius_at(level), dims_l)
        pts = _level_points(kps, level, dims_l, radius)
        obs = _observe(fix_feat, mov_feat, level, pts, radius, cfg)
        observations[level] = obs
        store_l: AttentionStore | None = None
        # a couple of observations extrapolated volume-wide do more harm than
        # a zero residual the next level can still correct
        if len(obs.points) < max(1, cfg.min_observations):
            warnings.warn(f"level {level}: {len(obs.points)} observations is too few, using a zero residual")
            residual = np.zeros_like(phi)
        else:
            try:
                if cfg.variant == "tps":
                    residual = tps_field(obs, dims_l).vectors
                else:
                    stride = max(1, min(cfg.stride, min(dims_l) // 2))
                    fld, store_l = evaluate_field(obs, dims_l, model, fix_feat, level,
                                                  cfg.variant, cfg.k, stride)
                    residual = fld.vectors
            except EmptyObservationsError:
                warnings.warn(f"level {level}: no observations, using a zero residual")
                residual = np.zeros_like(phi)
        if level == 0:
            prior0 = phi.copy()
            store0 = store_l
        phi = phi + residual
        residual_norms[level] = float(np.sqrt((residual.astype(np.float64) ** 2).sum(0)).mean())
        timing[f"level_{level}"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if store0 is not None:
        confidence = confidence_map(store0, fixed.spacing)
    else:
        confidence = Volume3(np.zeros((1, *fixed.dims), np.float32), fixed.spacing, fixed.origin)
    timing["confidence"] = time.perf_counter() - t0
    timing["total"] = time.perf_counter() - t_start

    out_field = DisplacementField(Volume3(phi, fixed.spacing, fixed.origin))
    assert prior0 is not None
    return RegistrationResult(out_field, observations, residual_norms, confidence,
                              kps, store0, prior0, scales, timing)


def augment(vol: Volume3, rng: np.random.Generator) -> Volume3:
    """Additive Gaussian noise and/or blur, each applied with probability 0.5.

    All gate/strength values are drawn up front so the rng consumption per
    call is fixed regardless of which branches fire.
    """
    gate_noise = rng.uniform()
    sigma_noise = rng.uniform(0.0, 0.05)
    gate_blur = rng.uniform()
    sigma_blur = rng.uniform(0.0, 1.5)
    data = vol.data
    out = data
    if gate_noise < 0.5:
        scale = sigma_noise * float(data.max() - data.min())
        out = out + rng.normal(size=data.shape).astype(np.float32) * np.float32(scale)
    if gate_blur < 0.5 and sigma_blur > 1e-6:
        out = blur_array(np.ascontiguousarray(out, np.float32), sigma_blur)
    if out is data:
        return vol
    return vol.with_data(np.ascontiguousarray(out, np.float32))


def _case_pair(case):
    """Accept SyntheticCase-like objects or (moving, fixed) tuples."""
    if isinstance(case, (tuple, list)):
        moving, fixed = case
        return moving, fixed, None
    return case.moving, case.fixed, case


def _warp_node(image: np.ndarray, coords: Node, dims_l) -> Node:
    """Differentiable resample of a constant (C,d,h,w) image at field coords."""
    gathered = ops.trilinear_gather(constant(image), coords)  # (N, C)
    return ops.reshape(ops.transpose2(gathered), (image.shape[0], *dims_l))


def _case_loss(case, model: KernelModel, cfg: RegistrationConfig, rng: np.random.Generator):
    """Build the per-pair loss graph and return its root node.

    Each training level estimates its field in one shot from the unwarped
    moving image (no cross-level composition, so one encode per image per
    step); inference composes the levels.
    """
    moving, fixed, meta = _case_pair(case)
    _check_pair(moving, fixed)
    gt_fld = getattr(meta, "gt_field", None) if meta is not None else None
    gt_vec = gt_fld.vectors if gt_fld is not None else None
    if cfg.augment:
        moving = augment(moving, rng)
        fixed = augment(fixed, rng)
    scales = min(cfg.scales, model.scales, max_levels(fixed.dims))
    dims_all = pyramid_dims(fixed.dims, scales)
    levels = tuple(cfg.train_levels) if cfg.train_levels is not None else tuple(range(scales))
    for level in levels:
        if not 0 <= level < scales:
            raise InvalidInputError(f"train level {level} outside [0, {scales})")
    if cfg.use_landmark and (meta is None or getattr(meta, "landmarks_fixed", None) is None):
        raise InvalidInputError("use_landmark requires cases with landmark pairs")
    if cfg.use_dice and (meta is None or not getattr(meta, "masks_fixed", None)):
        raise InvalidInputError("use_dice requires cases with masks")

    leaves = model.store.leaves()
    fix_nodes = encode_graph(fixed, leaves, scales, model.plan)
    mov_nodes = encode_graph(moving, leaves, scales, model.plan)
    if cfg.feature_norm:
        fix_nodes = [_unit_features_node(x) for x in fix_nodes]
        mov_nodes = [_unit_features_node(x) for x in mov_nodes]
    fix_imgs = build_pyramid(fixed, scales)
    mov_imgs = build_pyramid(moving, scales)
    mask_keys = []
    fix_masks = mov_masks = {}
    if cfg.use_dice:
        mask_keys = sorted(set(meta.masks_fixed) & set(meta.masks_moving))
        fix_masks = {k: build_pyramid(meta.masks_fixed[k], scales) for k in mask_keys}
        mov_masks = {k: build_pyramid(meta.masks_moving[k], scales) for k in mask_keys}

    kps = foerstner_detect(fixed, cfg.detect_sigma, cfg.nms_radius)
    if len(kps) > cfg.train_keypoints:
        # a fresh random subset every call: successive steps supervise
        # different sites, a fixed subset just gets memorized
        pick = rng.choice(len(kps), size=cfg.train_keypoints, replace=False)
        kps = KeypointSet(kps.positions[pick], kps.scores[pick])

    terms = []
    for level in levels:
        dims_l = dims_all[level]
        radius = _fit_radius(cfg.radius_at(level), dims_l)
        pts = _level_points(kps, level, dims_l, radius)
        if len(pts) == 0:
            warnings.warn(f"level {level}: no keypoints, skipping it in training")
            continue
        costs = cost_volume_graph(fix_nodes[level], mov_nodes[level], pts, radius)
        # the spread normalizer is detached: it steadies the softargmax scale
        # without routing gradient through a max
        scale = np.broadcast_to(_cost_scale(costs.value), costs.shape).astype(costs.value.dtype)
        scaled = ops.mul(costs, constant(scale.copy()))
        disp_node, _peak = soft_correspondence_graph(scaled, radius, cfg.tau)
        p = None
        if cfg.use_sharpness or (cfg.use_correspondence and gt_vec is not None):
            p = ops.softmax(ops.mul(scaled, 1.0 / cfg.tau))
        if cfg.use_correspondence and gt_vec is not None:
            # rows carry their own exact answer here, so teach the peak
            # placement directly instead of waiting for it to percolate back
            # through the reconstruction; rows whose true offset lies outside
            # the search window are left out
            gt_at = sample_channels(gt_vec, pts * float(2 ** level)) / float(2 ** level)
            tgt = np.rint(gt_at)
            inside = np.all(np.abs(tgt) <= radius, axis=1)
            if inside.any():
                offs = displacement_offsets(radius)
                width = 2 * radius + 1
                idx = ((tgt[inside, 0] + radius) * width + (tgt[inside, 1] + radius)) * width \
                    + (tgt[inside, 2] + radius)
                rows = ops.gather_rows(p, np.flatnonzero(inside))
                hot = np.zeros((int(inside.sum()), len(offs)), np.float32)
                hot[np.arange(len(idx)), idx.astype(int)] = 1.0
                picked = ops.reduce_sum(ops.mul(rows, constant(hot)), axis=-1)
                terms.append(ops.mul(ops.reduce_mean(ops.log(ops.add(picked, 1e-12))), -1.0))
        elif cfg.use_sharpness:
            # no ground truth: inference only trusts rows whose mass
            # concentrates on one offset, so at least penalize row entropy
            ent = ops.reduce_sum(ops.mul(p, ops.log(ops.add(p, 1e-12))), axis=-1)
            terms.append(ops.mul(ops.reduce_mean(ent), -1.0))
        stride = max(1, min(cfg.train_stride, min(dims_l) // 2))
        variant = cfg.variant if cfg.variant != "tps" else "full"
        fld = evaluate_field_graph(leaves, fix_nodes[level], pts, disp_node,
                                   dims_l, level, variant, cfg.k, stride)
        n = int(np.prod(dims_l))
        coords = ops.add(ops.transpose2(ops.reshape(fld, (3, n))),
                         constant(grid_coords(dims_l).astype(np.float32)))
        if cfg.image_loss != "none":
            warped = _warp_node(mov_imgs[level].data, coords, dims_l)
            target = constant(fix_imgs[level].data)
            win = min(cfg.ncc_window, min(dims_l))
            win = win if win % 2 else win - 1
            terms.append(mse_loss(warped, target) if cfg.image_loss == "mse"
                         else ncc_loss(warped, target, win))
        if cfg.use_diffusion:
            terms.append(diffusion_loss(fld))
        if cfg.use_dice:
            for key in mask_keys:
                warped_mask = _warp_node(mov_masks[key][level].data, coords, dims_l)
                terms.append(dice_loss(warped_mask, constant(fix_masks[key][level].data)))
        if cfg.use_landmark:
            lf = np.asarray(meta.landmarks_fixed, np.float64) / float(2 ** level)
            lm = np.asarray(meta.landmarks_moving, np.float64) / float(2 ** level)
            moved = ops.add(ops.trilinear_gather(fld, lf), constant(lf.astype(np.float32)))
            spacing_l = tuple(s * 2 ** level for s in fixed.spacing)
            terms.append(landmark_loss(moved, lm.astype(np.float32), spacing_l))
    if not terms:
        raise EmptyObservationsError("no training level produced a loss term")
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total, leaves


def _endpoint_error(pred: DisplacementField, gt: DisplacementField) -> float:
    d = pred.vectors.astype(np.float64) - gt.vectors.astype(np.float64)
    return float(np.sqrt((d ** 2).sum(0)).mean())


def _global_ncc(a: np.ndarray, b: np.ndarray) -> float:
    af = a.astype(np.float64).ravel()
    bf = b.astype(np.float64).ravel()
    af -= af.mean()
    bf -= bf.mean()
    denom = np.sqrt((af ** 2).sum() * (bf ** 2).sum())
    if denom < 1e-12:
        return 0.0
    return float((af * bf).sum() / denom)


def validation_score(cases, model: KernelModel, cfg: RegistrationConfig) -> float:
    """Mean endpoint error vs ground truth when available, else -NCC (lower is better)."""
    fast = replace(cfg, stride=max(cfg.stride, 2))
    scores = []
    for case in cases:
        moving, fixed, meta = _case_pair(case)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = register(moving, fixed, model, fast)
        gt = getattr(meta, "gt_field", None) if meta is not None else None
        if gt is not None:
            scores.append(_endpoint_error(result.field, gt))
        else:
            warped = warp(moving, result.field)
            scores.append(-_global_ncc(warped.data, fixed.data))
    return float(np.mean(scores))


def train(cases, model: KernelModel, cfg: RegistrationConfig | None = None,
          val_cases=None) -> TrainResult:
    """Fit the encoder and kernel on synthetic pairs, updating `model` in place.

    One step per case per epoch, case order reshuffled per epoch. Validation
    runs after every epoch on `val_cases` (default: the first training case);
    the best-scoring parameters are restored at the end. A non-finite loss
    aborts immediately and restores the last finished epoch.
    """
    cfg = cfg if cfg is not None else RegistrationConfig()
    cases = list(cases)
    if not cases:
        raise InvalidInputError("training needs at least one case")
    if val_cases is None:
        val_cases = cases[:1]
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.store, lr=cfg.lr)

    step_losses: list = []
    epoch_losses: list = []
    val_scores: list = []
    best_flat = model.store.flat()
    best_score = validation_score(val_cases, model, cfg)
    best_epoch = -1
    last_good = best_flat
    aborted = False

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(cases))
        epoch_sum = 0.0
        for i in order:
            loss, leaves = _case_loss(cases[int(i)], model, cfg, rng)
            value = float(loss.value)
            if not np.isfinite(value):
                warnings.warn(f"epoch {epoch}: non-finite loss, restoring last finished epoch")
                model.store.load_flat(last_good)
                aborted = True
                break
            backward(loss)
            grads = {name: node.grad for name, node in leaves.items() if node.grad is not None}
            if not all(np.isfinite(g).all() for g in grads.values()):
                warnings.warn(f"epoch {epoch}: non-finite gradient, restoring last finished epoch")
                model.store.load_flat(last_good)
                aborted = True
                break
            opt.step(grads)
            step_losses.append(value)
            epoch_sum += value
        if aborted:
            break
        epoch_losses.append(epoch_sum / len(cases))
        last_good = model.store.flat()
        score = validation_score(val_cases, model, cfg)
        val_scores.append(score)
        if score < best_score - 1e-6:
            best_score = score
            best_flat = last_good
            best_epoch = epoch
        elif cfg.patience and epoch - max(best_epoch, 0) >= cfg.patience:
            break
    model.store.load_flat(best_flat)
    return TrainResult(step_losses, epoch_losses, val_scores, best_epoch, aborted)
