"""Seeded phantom pairs with exact ground truth for desk-scale experiments.

A case is built backwards from the answer: the generator output is the moving
image, and the fixed image is warp(moving, gt_field). Registration of moving
onto fixed therefore has gt_field as its exact solution, and landmark pairs
satisfy moving_lm = fixed_lm + gt(fixed_lm) with no interpolation slack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .keypoints import KeypointSet, farthest_point_sample
from .volume import (
    DisplacementField,
    Volume3,
    blur_array,
    jacobian_determinants,
    warp,
)

DEFAULT_DIMS = (48, 64, 64)
DEFAULT_SPACING = (3.0, 1.4, 1.4)


@dataclass
class SyntheticCase:
    """Fixed/moving pair with exact deformation, paired landmarks, and masks.

    Landmarks are voxel coordinates (z,y,x); masks live on both grids so dice
    and margin metrics have aligned inputs.
    """

    fixed: Volume3
    moving: Volume3
    gt_field: DisplacementField
    landmarks_fixed: np.ndarray
    landmarks_moving: np.ndarray
    masks_fixed: dict = field(default_factory=dict)
    masks_moving: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def spacing(self):
        return self.fixed.spacing


def _coord_grids(dims):
    return np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")


def gen_phantom(seed: int, dims=DEFAULT_DIMS, spacing=DEFAULT_SPACING):
    """Smooth blobs + ellipsoid shells + faint texture, plus body/tumor/treatment masks.

    Returns (Volume3 with intensities in [0, 1], dict of uint8 mask volumes).
    The tumor sphere is nested strictly inside the treatment sphere.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    zz, yy, xx = _coord_grids(dims)
    center = np.array(dims, np.float64) / 2.0
    img = np.zeros(dims, np.float64)

    # body: large ellipsoid filling most of the grid, soft intensity falloff
    semi = np.array(dims, np.float64) / 2.0 - 3.0
    body_q = (((zz - center[0]) / semi[0]) ** 2 + ((yy - center[1]) / semi[1]) ** 2
              + ((xx - center[2]) / semi[2]) ** 2)
    body = body_q <= 1.0
    img += 0.35 * np.clip(1.0 - body_q, 0.0, None)

    for _ in range(rng.integers(10, 16)):
        c = rng.uniform(0.25, 0.75, 3) * dims
        sig = rng.uniform(2.0, 6.0, 3)
        amp = rng.uniform(0.25, 0.9)
        r2 = (((zz - c[0]) / sig[0]) ** 2 + ((yy - c[1]) / sig[1]) ** 2 + ((xx - c[2]) / sig[2]) ** 2)
        img += amp * np.exp(-0.5 * r2)

    for _ in range(rng.integers(3, 6)):
        c = rng.uniform(0.3, 0.7, 3) * dims
        ax = rng.uniform(3.0, 9.0, 3)
        q = (((zz - c[0]) / ax[0]) ** 2 + ((yy - c[1]) / ax[1]) ** 2 + ((xx - c[2]) / ax[2]) ** 2)
        img += rng.uniform(0.2, 0.5) * ((q > 0.7) & (q <= 1.0))  # shell, sharp edges

    img += blur_array(rng.normal(scale=0.03, size=(1, *dims)).astype(np.float32), 1.0)[0]
    img *= body
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-9)

    tumor_c = center + rng.uniform(-0.08, 0.08, 3) * dims
    tumor_r = min(dims) * rng.uniform(0.10, 0.14)
    dist2 = (zz - tumor_c[0]) ** 2 + (yy - tumor_c[1]) ** 2 + (xx - tumor_c[2]) ** 2
    tumor = dist2 <= tumor_r ** 2
    treatment = dist2 <= (tumor_r + min(dims) * 0.08) ** 2
    masks = {
        "body": Volume3(body.astype(np.float32), spacing),
        "tumor": Volume3(tumor.astype(np.float32), spacing),
        "treatment": Volume3(treatment.astype(np.float32), spacing),
    }
    return Volume3(img.astype(np.float32), spacing), masks


def gen_deformation(seed: int, dims=DEFAULT_DIMS, magnitude: float = 8.0,
                    sigma: float = 8.0, spacing=DEFAULT_SPACING,
                    max_attempts: int = 20) -> DisplacementField:
    """Blurred white-noise field rescaled to a peak magnitude, diffeomorphic.

    Samples are rejected until the interior Jacobian determinant stays above
    0.1; each retry draws from the next sub-seed so results stay reproducible.
    """
    if magnitude < 0:
        raise InvalidInputError(f"magnitude must be >= 0, got {magnitude}")
    dims = tuple(int(d) for d in dims)
    if magnitude == 0.0:
        return DisplacementField.zeros(dims, spacing)
    pad = int(np.ceil(3.0 * sigma))  # blur on a padded grid so borders keep interior statistics
    for attempt in range(max_attempts):
        rng = np.random.default_rng((seed, attempt))
        noise = rng.normal(size=(3, *(d + 2 * pad for d in dims))).astype(np.float32)
        smooth = blur_array(noise, sigma)[:, pad:pad + dims[0], pad:pad + dims[1], pad:pad + dims[2]]
        norms = np.sqrt((smooth.astype(np.float64) ** 2).sum(0))
        peak = norms.max()
        if peak <= 0:
            continue
        arr = (smooth * (magnitude / peak)).astype(np.float32)
        fld = DisplacementField(Volume3(arr, spacing))
        if jacobian_determinants(fld).min() > 0.1:
            return fld
    raise InvalidInputError(
        f"no diffeomorphic sample at magnitude {magnitude} within {max_attempts} attempts; lower it or raise sigma")


def _landmark_sites(img: np.ndarray, count: int, margin: int, rng) -> np.ndarray:
    """Integer voxel positions at strong gradients, spread by farthest-point sampling."""
    gz, gy, gx = np.gradient(img.astype(np.float64))
    mag = np.sqrt(gz * gz + gy * gy + gx * gx)
    interior = np.zeros_like(mag, bool)
    interior[margin:-margin, margin:-margin, margin:-margin] = True
    mag[~interior] = 0.0
    order = np.argsort(mag.ravel())[::-1][: max(count * 8, 200)]
    pos = np.stack(np.unravel_index(order, img.shape), axis=1).astype(np.float64)
    scores = mag.ravel()[order]
    keep = scores > 0
    pos, scores = pos[keep], scores[keep]
    if len(pos) < count:
        # flat phantom: pad with uniform random interior sites
        extra = rng.uniform(margin, np.array(img.shape) - 1 - margin, size=(count - len(pos), 3))
        pos = np.vstack([pos, np.round(extra)])
        scores = np.concatenate([scores, np.full(len(extra), 1e-6)])
    picked = farthest_point_sample(KeypointSet(pos, scores), count)
    return picked.positions.astype(np.float64)


def make_case(seed: int, dims=DEFAULT_DIMS, magnitude: float = 8.0,
              spacing=DEFAULT_SPACING, n_landmarks: int = 24,
              sigma: float = 8.0) -> SyntheticCase:
    """Full desk case: moving phantom, warped fixed image, landmarks, masks."""
    if n_landmarks < 1:
        raise InvalidInputError("need at least one landmark")
    moving, masks_moving = gen_phantom(seed, dims, spacing)
    gt = gen_deformation(seed + 10_000, dims, magnitude, sigma=sigma, spacing=spacing)
    fixed = warp(moving, gt)
    masks_fixed = {k: warp(v, gt, mode="nearest") for k, v in masks_moving.items()}

    rng = np.random.default_rng(seed + 20_000)
    margin = int(np.ceil(magnitude)) + 2
    lf = _landmark_sites(fixed.scalar(), n_landmarks, margin, rng)
    gt_at = gt.vectors[:, lf[:, 0].astype(int), lf[:, 1].astype(int), lf[:, 2].astype(int)].T
    lm = lf + gt_at
    return SyntheticCase(fixed, moving, gt, lf, lm, masks_fixed, masks_moving, seed=seed)


def save_case(case: SyntheticCase, out_dir) -> None:
    """Write a case directory: NIfTI volumes/field/masks, mm landmark CSVs,
    and a small case.json naming the parts."""
    import json
    import os

    from . import io as swio

    os.makedirs(out_dir, exist_ok=True)
    p = lambda name: os.path.join(out_dir, name)
    swio.write_volume(p("fixed.nii"), case.fixed)
    swio.write_volume(p("moving.nii"), case.moving)
    swio.write_field(p("field.nii"), case.gt_field)
    sp, og = case.fixed.spacing, case.fixed.origin
    swio.write_landmarks(p("landmarks_fixed.csv"), case.landmarks_fixed, sp, og)
    swio.write_landmarks(p("landmarks_moving.csv"), case.landmarks_moving, sp, og)
    names = sorted(set(case.masks_fixed) & set(case.masks_moving))
    for name in names:
        swio.write_volume(p(f"mask_{name}_fixed.nii"), case.masks_fixed[name], dtype=np.uint8)
        swio.write_volume(p(f"mask_{name}_moving.nii"), case.masks_moving[name], dtype=np.uint8)
    with open(p("case.json"), "w", encoding="utf-8") as f:
        json.dump({"seed": case.seed, "masks": names,
                   "n_landmarks": int(len(case.landmarks_fixed))}, f, indent=2)
        f.write("\n")


def load_case(case_dir) -> SyntheticCase:
    """Inverse of save_case. The ground-truth field file is optional."""
    import json
    import os

    from . import io as swio

    p = lambda name: os.path.join(case_dir, name)
    if not os.path.exists(p("case.json")):
        raise InvalidInputError(f"{case_dir} is not a case directory (no case.json)")
    with open(p("case.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    fixed = swio.read_volume(p("fixed.nii"))
    moving = swio.read_volume(p("moving.nii"))
    gt = swio.read_field(p("field.nii")) if os.path.exists(p("field.nii")) \
        else DisplacementField.zeros(fixed.dims, fixed.spacing)
    sp, og = fixed.spacing, fixed.origin
    lf = swio.read_landmarks(p("landmarks_fixed.csv"), sp, og)
    lm = swio.read_landmarks(p("landmarks_moving.csv"), sp, og)
    masks_fixed, masks_moving = {}, {}
    for name in manifest.get("masks", []):
        masks_fixed[name] = swio.read_volume(p(f"mask_{name}_fixed.nii"))
        masks_moving[name] = swio.read_volume(p(f"mask_{name}_moving.nii"))
    return SyntheticCase(fixed, moving, gt, lf, lm, masks_fixed, masks_moving,
                         seed=int(manifest.get("seed", 0)))
