"""Multi-scale learnable feature encoder.

Each level applies two 3x3x3 convolutions with ReLU, then a stride-2 average
pool feeds the next level, so level dims track the image pyramid exactly.
Two evaluation paths share the same parameters: a graph path for training and
a plain numpy path for inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterStore
from .autodiff import ops
from .autodiff.engine import Node, leaf
from .errors import InvalidInputError
from .volume import Volume3, pyramid_dims, sample_channels

DEFAULT_PLAN = (8, 16, 16, 32, 32)


@dataclass
class FeaturePyramid:
    """Per-level feature volumes; level l has the image pyramid's level-l dims."""

    levels: list

    def __len__(self):
        return len(self.levels)

    def level(self, l: int) -> Volume3:
        return self.levels[l]


def channel_plan(scales: int, plan=DEFAULT_PLAN):
    """Fine-to-coarse channel counts for the configured number of scales."""
    if scales < 1:
        raise InvalidInputError("scales must be >= 1")
    if scales > len(plan):
        # extend by repeating the last width; default plan covers five scales
        plan = tuple(plan) + (plan[-1],) * (scales - len(plan))
    return tuple(int(c) for c in plan[:scales])


def create_feature_params(store: ParameterStore, scales: int, plan=DEFAULT_PLAN) -> None:
    """Register encoder conv weights/biases on the store (Kaiming / zeros)."""
    chans = channel_plan(scales, plan)
    c_in = 1
    for l, c_out in enumerate(chans):
        for j, (ci, co) in enumerate(((c_in, c_out), (c_out, c_out))):
            store.create(f"feat.l{l}.conv{j}.w", (co, ci, 3, 3, 3), fan_in=ci * 27)
            store.create(f"feat.l{l}.conv{j}.b", (co,), init="zeros")
        c_in = c_out


def encode(vol: Volume3, store: ParameterStore, scales: int, plan=DEFAULT_PLAN) -> FeaturePyramid:
    """Inference-path encoding: numpy forward only."""
    pyramid_dims(vol.dims, scales)  # raises when dims cannot support the scales
    chans = channel_plan(scales, plan)
    levels = []
    x = vol.data
    spacing = vol.spacing
    for l in range(len(chans)):
        for j in range(2):
            x = ops.relu_forward(ops.conv3d_forward(x, store[f"feat.l{l}.conv{j}.w"], store[f"feat.l{l}.conv{j}.b"]))
        levels.append(Volume3(x, spacing, vol.origin))
        if l + 1 < len(chans):
            x, _ = ops.avg_pool2_forward(x)
            spacing = tuple(s * 2 for s in spacing)
    return FeaturePyramid(levels)


def encode_graph(vol: Volume3, leaves: dict, scales: int, plan=DEFAULT_PLAN) -> list:
    """Training-path encoding: list of per-level feature nodes (C_l, D_l, H_l, W_l)."""
    pyramid_dims(vol.dims, scales)
    chans = channel_plan(scales, plan)
    levels = []
    x = leaf(vol.data)
    for l in range(len(chans)):
        for j in range(2):
            x = ops.relu(ops.conv3d(x, leaves[f"feat.l{l}.conv{j}.w"], leaves[f"feat.l{l}.conv{j}.b"]))
        levels.append(x)
        if l + 1 < len(chans):
            x = ops.avg_pool2(x)
    return levels


def graph_to_pyramid(levels: list, spacing, origin=(0.0, 0.0, 0.0)) -> FeaturePyramid:
    """Snapshot graph-path feature nodes into a plain FeaturePyramid."""
    out = []
    sp = tuple(spacing)
    for node in levels:
        out.append(Volume3(np.asarray(node.value, np.float32), sp, origin))
        sp = tuple(s * 2 for s in sp)
    return FeaturePyramid(out)


def sample_features(pyr: FeaturePyramid, level: int, pts) -> np.ndarray:
    """Trilinear per-channel feature lookup at level-l voxel coordinates, (N, C_l)."""
    if not 0 <= level < len(pyr.levels):
        raise InvalidInputError(f"level {level} outside pyramid of {len(pyr.levels)}")
    return sample_channels(pyr.levels[level].data, np.asarray(pts, np.float64).reshape(-1, 3))
