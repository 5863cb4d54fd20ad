"""Training objectives built on the op set.

Image terms take (1,D,H,W) nodes, field terms (3,D,H,W), landmark terms (N,3).
All return scalar nodes.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from .engine import Node, constant
from . import ops


def mse_loss(a: Node, b: Node) -> Node:
    """Mean squared intensity difference."""
    if a.shape != b.shape:
        raise InvalidInputError(f"mse shapes differ: {a.shape} vs {b.shape}")
    return ops.reduce_mean(ops.square(ops.sub(a, b)))


def _box_filter(x: Node, window: int) -> Node:
    """Separable local mean with zero padding (border windows keep the full divisor)."""
    dt = x.value.dtype
    for axis in range(3):
        shape = [1, 1, 1, 1, 1]
        shape[2 + axis] = window
        k = constant(np.full(shape, 1.0 / window, dt))
        x = ops.conv3d(x, k)
    return x


def ncc_loss(a: Node, b: Node, window: int = 9) -> Node:
    """Negative mean squared local correlation coefficient.

    Local means/variances over a cubic window (zero padded), squared correlation
    cc = cross^2 / (var_a * var_b + 1e-5), loss = -mean(cc). Perfect linear
    agreement drives the loss toward -1.
    """
    if a.shape != b.shape or a.value.ndim != 4 or a.shape[0] != 1:
        raise InvalidInputError(f"ncc expects matching (1,D,H,W) volumes, got {a.shape} and {b.shape}")
    if window % 2 == 0 or window < 3:
        raise InvalidInputError(f"ncc window must be odd and >= 3, got {window}")
    if window > min(a.shape[1:]):
        raise InvalidInputError(f"ncc window {window} exceeds volume dims {a.shape[1:]}")
    mean_a = _box_filter(a, window)
    mean_b = _box_filter(b, window)
    cross = ops.sub(_box_filter(ops.mul(a, b), window), ops.mul(mean_a, mean_b))
    var_a = ops.sub(_box_filter(ops.square(a), window), ops.square(mean_a))
    var_b = ops.sub(_box_filter(ops.square(b), window), ops.square(mean_b))
    cc = ops.div(ops.square(cross), ops.add(ops.mul(var_a, var_b), 1e-5))
    return ops.mul(ops.reduce_mean(cc), -1.0)


def diffusion_loss(field: Node) -> Node:
    """Smoothness penalty: mean squared forward difference of the field components."""
    return ops.diffusion_penalty(field)


def dice_loss(a: Node, b: Node, eps: float = 1e-5) -> Node:
    """1 - soft Dice overlap between probability volumes."""
    if a.shape != b.shape:
        raise InvalidInputError(f"dice shapes differ: {a.shape} vs {b.shape}")
    inter = ops.reduce_sum(ops.mul(a, b))
    denom = ops.add(ops.add(ops.reduce_sum(a), ops.reduce_sum(b)), eps)
    dice = ops.div(ops.add(ops.mul(inter, 2.0), eps), denom)
    return ops.add(ops.mul(dice, -1.0), 1.0)


def landmark_loss(warped: Node, target, spacing) -> Node:
    """Mean Euclidean landmark distance in mm.

    warped: (N,3) voxel coordinates (graph node); target: matching array or node;
    spacing scales each axis to mm. A 1e-12 floor inside the sqrt keeps the
    gradient finite at exact alignment.
    """
    tgt = target if isinstance(target, Node) else constant(np.asarray(target), like=warped)
    if warped.shape != tgt.shape or warped.value.ndim != 2 or warped.shape[1] != 3:
        raise InvalidInputError(f"landmark shapes differ or are not (N,3): {warped.shape} vs {tgt.shape}")
    sp = constant(np.asarray(spacing, dtype=warped.value.dtype).reshape(1, 3), like=warped)
    delta = ops.mul(ops.sub(warped, tgt), sp)
    sq = ops.reduce_sum(ops.square(delta), axis=-1)
    return ops.reduce_mean(ops.sqrt(ops.add(sq, 1e-12)))
