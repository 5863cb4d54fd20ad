"""Finite-difference verification of graph gradients (64-bit check mode)."""

from __future__ import annotations

import numpy as np

from .engine import backward, leaf


def analytic_gradients(build, arrays: dict) -> dict:
    """Backprop gradients of build(leaves) with float64 leaves.

    build maps a dict of leaf nodes to a scalar node. Returns name -> gradient.
    """
    leaves = {k: leaf(np.asarray(v, np.float64), requires_grad=True, dtype=np.float64) for k, v in arrays.items()}
    root = build(leaves)
    backward(root)
    return {k: (np.zeros_like(arrays[k], dtype=np.float64) if n.grad is None else np.asarray(n.grad, np.float64))
            for k, n in leaves.items()}


def numeric_gradients(build, arrays: dict, h: float = 1e-3) -> dict:
    """Central-difference gradients, perturbing one scalar element at a time."""
    def value_at(current: dict) -> float:
        leaves = {k: leaf(v, dtype=np.float64) for k, v in current.items()}
        return float(build(leaves).value)

    base = {k: np.asarray(v, np.float64).copy() for k, v in arrays.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = value_at(base)
            flat[i] = orig - h
            lo = value_at(base)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads[name] = g
    return grads


def gradcheck(build, arrays: dict, h: float = 1e-3) -> dict:
    """Per-tensor relative error between analytic and finite-difference gradients.

    Error is max|ga-gf| / max(1, max|ga|, max|gf|), so near-zero gradients are
    judged on absolute error. Returns name -> (rel_err, ga, gf).
    """
    ga = analytic_gradients(build, arrays)
    gf = numeric_gradients(build, arrays, h=h)
    out = {}
    for name in arrays:
        a, f = ga[name], gf[name]
        denom = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(f).max(initial=0.0)))
        out[name] = (float(np.abs(a - f).max(initial=0.0)) / denom, a, f)
    return out


def max_rel_error(build, arrays: dict, h: float = 1e-3) -> float:
    """Worst relative error across all leaves; the pass bar is 1e-4."""
    report = gradcheck(build, arrays, h=h)
    return max(rel for rel, _, _ in report.values()) if report else 0.0


def directional_check(build, arrays: dict, h: float = 1e-3, seed: int = 0) -> float:
    """Relative error of the directional derivative along one random direction.

    Scales to large graphs (two forwards, one backward) where elementwise
    finite differences would be prohibitive. Same error convention as gradcheck.
    """
    rng = np.random.default_rng(seed)
    base = {k: np.asarray(v, np.float64).copy() for k, v in arrays.items()}
    direction = {}
    norm2 = 0.0
    for k, v in base.items():
        d = rng.normal(size=v.shape)
        direction[k] = d
        norm2 += float((d * d).sum())
    scale = 1.0 / max(np.sqrt(norm2), 1e-12)
    direction = {k: d * scale for k, d in direction.items()}

    ga = analytic_gradients(build, base)
    analytic = sum(float((ga[k] * direction[k]).sum()) for k in base)

    def value_at(sign: float) -> float:
        shifted = {k: v + sign * h * direction[k] for k, v in base.items()}
        leaves = {k: leaf(v, dtype=np.float64) for k, v in shifted.items()}
        return float(build(leaves).value)

    numeric = (value_at(+1.0) - value_at(-1.0)) / (2.0 * h)
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
