"""Differentiable op set plus the pure-numpy forward helpers reused by fast paths.

Every op returns a Node; backward closures accumulate into input .grad. Ops
propagate the input dtype so graphs built from float64 leaves run end to end
in float64 (finite-difference check mode).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidInputError
from ..volume import tri_corners
from .engine import Node, accumulate


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Node, b) -> Node:
    if isinstance(b, Node):
        out = Node(a.value + b.value, "add", (a, b))
        def bwd(g):
            accumulate(a, _unbroadcast(g, a.shape))
            accumulate(b, _unbroadcast(g, b.shape))
    else:
        out = Node(a.value + b, "add", (a,))
        def bwd(g):
            accumulate(a, g)
    out._backward = bwd if out.requires_grad else None
    return out


def sub(a: Node, b) -> Node:
    if isinstance(b, Node):
        out = Node(a.value - b.value, "sub", (a, b))
        def bwd(g):
            accumulate(a, _unbroadcast(g, a.shape))
            accumulate(b, _unbroadcast(-g, b.shape))
    else:
        out = Node(a.value - b, "sub", (a,))
        def bwd(g):
            accumulate(a, g)
    out._backward = bwd if out.requires_grad else None
    return out


def mul(a: Node, b) -> Node:
    if isinstance(b, Node):
        out = Node(a.value * b.value, "mul", (a, b))
        def bwd(g):
            accumulate(a, _unbroadcast(g * b.value, a.shape))
            accumulate(b, _unbroadcast(g * a.value, b.shape))
    else:
        out = Node(a.value * b, "mul", (a,))
        def bwd(g):
            accumulate(a, g * b)
    out._backward = bwd if out.requires_grad else None
    return out


def div(a: Node, b) -> Node:
    if isinstance(b, Node):
        out = Node(a.value / b.value, "div", (a, b))
        def bwd(g):
            accumulate(a, _unbroadcast(g / b.value, a.shape))
            accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.shape))
    else:
        out = Node(a.value / b, "div", (a,))
        def bwd(g):
            accumulate(a, g / b)
    out._backward = bwd if out.requires_grad else None
    return out


def square(a: Node) -> Node:
    out = Node(a.value * a.value, "square", (a,))
    def bwd(g):
        accumulate(a, 2.0 * a.value * g)
    out._backward = bwd if out.requires_grad else None
    return out


def sqrt(a: Node) -> Node:
    """Elementwise square root; inputs must be strictly positive for finite grads."""
    s = np.sqrt(a.value)
    out = Node(s, "sqrt", (a,))
    def bwd(g):
        accumulate(a, g / (2.0 * s))
    out._backward = bwd if out.requires_grad else None
    return out


def log(a: Node) -> Node:
    """Elementwise natural log; inputs must be strictly positive."""
    out = Node(np.log(a.value), "log", (a,))
    def bwd(g):
        accumulate(a, g / a.value)
    out._backward = bwd if out.requires_grad else None
    return out


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp values; gradient is zero outside (lo, hi)."""
    out = Node(np.clip(a.value, lo, hi), "clip", (a,))
    mask = (a.value > lo) & (a.value < hi)
    def bwd(g):
        accumulate(a, g * mask)
    out._backward = bwd if out.requires_grad else None
    return out


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu(a: Node) -> Node:
    out = Node(relu_forward(a.value), "relu", (a,))
    def bwd(g):
        accumulate(a, g * (a.value > 0))
    out._backward = bwd if out.requires_grad else None
    return out


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    out = x @ w
    if b is not None:
        out = out + b
    return out


def dense(x: Node, w: Node, b: Node | None = None) -> Node:
    """Affine layer on 2D input: (B, In) @ (In, Out) + (Out,)."""
    if x.value.ndim != 2 or w.value.ndim != 2:
        raise InvalidInputError(f"dense expects 2D x and w, got {x.shape} and {w.shape}")
    inputs = (x, w) if b is None else (x, w, b)
    out = Node(dense_forward(x.value, w.value, None if b is None else b.value), "dense", inputs)
    def bwd(g):
        accumulate(x, g @ w.value.T)
        accumulate(w, x.value.T @ g)
        if b is not None:
            accumulate(b, g.sum(axis=0))
    out._backward = bwd if out.requires_grad else None
    return out


def softmax_forward(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Node) -> Node:
    """Softmax over the last axis."""
    if a.value.shape[-1] == 0:
        raise InvalidInputError("softmax over an empty axis")
    s = softmax_forward(a.value)
    out = Node(s, "softmax", (a,))
    def bwd(g):
        accumulate(a, (g - (g * s).sum(axis=-1, keepdims=True)) * s)
    out._backward = bwd if out.requires_grad else None
    return out


def reduce_sum(a: Node, axis=None) -> Node:
    if axis not in (None, -1):
        raise InvalidInputError(f"reduce_sum supports axis None or -1, got {axis}")
    out = Node(a.value.sum(axis=axis), "sum", (a,))
    def bwd(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            accumulate(a, np.broadcast_to(g[..., None], a.shape).copy())
    out._backward = bwd if out.requires_grad else None
    return out


def reduce_mean(a: Node, axis=None) -> Node:
    if axis not in (None, -1):
        raise InvalidInputError(f"reduce_mean supports axis None or -1, got {axis}")
    n = a.value.size if axis is None else a.value.shape[-1]
    out = Node(a.value.mean(axis=axis), "mean", (a,))
    def bwd(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g / n, a.shape).copy())
        else:
            accumulate(a, np.broadcast_to(g[..., None] / n, a.shape).copy())
    out._backward = bwd if out.requires_grad else None
    return out


def concat(nodes, axis: int = -1) -> Node:
    """Concatenate along the last axis."""
    if axis != -1:
        raise InvalidInputError("concat supports the last axis only")
    nodes = list(nodes)
    out = Node(np.concatenate([n.value for n in nodes], axis=-1), "concat", nodes)
    widths = [n.value.shape[-1] for n in nodes]
    def bwd(g):
        off = 0
        for n, w in zip(nodes, widths):
            accumulate(n, g[..., off:off + w])
            off += w
    out._backward = bwd if out.requires_grad else None
    return out


def reshape(a: Node, shape) -> Node:
    out = Node(a.value.reshape(shape), "reshape", (a,))
    def bwd(g):
        accumulate(a, g.reshape(a.shape))
    out._backward = bwd if out.requires_grad else None
    return out


def transpose2(a: Node) -> Node:
    if a.value.ndim != 2:
        raise InvalidInputError(f"transpose2 expects 2D, got {a.shape}")
    out = Node(a.value.T.copy(), "transpose2", (a,))
    def bwd(g):
        accumulate(a, g.T)
    out._backward = bwd if out.requires_grad else None
    return out


def _scatter_rows(shape, idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Segment-sum rows of g back into a zero array of `shape` at row indices idx."""
    out = np.zeros(shape, g.dtype)
    if idx.size == 0:
        return out
    flat_g = g.reshape(len(idx), -1)
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    sums = np.add.reduceat(flat_g[order], starts, axis=0)
    out.reshape(shape[0], -1)[sidx[starts]] = sums
    return out


def gather_rows(a: Node, idx) -> Node:
    """Row lookup a[idx] with scatter-add backward; idx is a plain int array."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise InvalidInputError("gather index out of range")
    out = Node(a.value[idx], "gather_rows", (a,))
    def bwd(g):
        accumulate(a, _scatter_rows(a.shape, idx, g))
    out._backward = bwd if out.requires_grad else None
    return out


def trilinear_gather(vol: Node, pts) -> Node:
    """Border-clamped trilinear sampling of a (C,D,H,W) node at (N,3) coords.

    Differentiable with respect to the volume and, when pts is a Node, the
    coordinates (clamped coordinates get zero coordinate gradient).
    """
    pts_node = pts if isinstance(pts, Node) else None
    p = np.asarray(pts.value if pts_node is not None else pts, dtype=np.float64).reshape(-1, 3)
    C, D, H, W = vol.value.shape
    low, high, frac, inside = tri_corners((D, H, W), p)
    dt = vol.value.dtype
    # corner tuples: flat index, per-axis weights, per-axis weight derivative signs
    corners = []
    for cz, wz, sz in ((low[0], 1.0 - frac[0], -1.0), (high[0], frac[0], 1.0)):
        for cy, wy, sy in ((low[1], 1.0 - frac[1], -1.0), (high[1], frac[1], 1.0)):
            for cx, wx, sx in ((low[2], 1.0 - frac[2], -1.0), (high[2], frac[2], 1.0)):
                corners.append(((cz * H + cy) * W + cx, wz, wy, wx, sz, sy, sx))
    flat = vol.value.reshape(C, -1)
    val = np.zeros((p.shape[0], C), dt)
    for idx, wz, wy, wx, _, _, _ in corners:
        val += (wz * wy * wx).astype(dt)[:, None] * flat[:, idx].T
    inputs = (vol,) if pts_node is None else (vol, pts_node)
    out = Node(val, "trilinear_gather", inputs)

    def bwd(g):
        if vol.requires_grad:
            size = D * H * W
            all_idx = np.concatenate([c[0] for c in corners])
            all_w = np.concatenate([c[1] * c[2] * c[3] for c in corners])
            gv = np.empty((C, size), np.float64)
            for ch in range(C):
                gv[ch] = np.bincount(all_idx, weights=all_w * np.tile(g[:, ch].astype(np.float64), 8), minlength=size)
            accumulate(vol, gv.reshape(C, D, H, W).astype(dt))
        if pts_node is not None and pts_node.requires_grad:
            gp = np.zeros((p.shape[0], 3), np.float64)
            gf = g.astype(np.float64)
            for idx, wz, wy, wx, sz, sy, sx in corners:
                gdot = (gf * flat[:, idx].T).sum(axis=1)
                gp[:, 0] += gdot * (sz * wy * wx)
                gp[:, 1] += gdot * (wz * sy * wx)
                gp[:, 2] += gdot * (wz * wy * sx)
            gp *= inside
            accumulate(pts_node, gp.astype(pts_node.value.dtype))

    out._backward = bwd if out.requires_grad else None
    return out


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 same-padding 3D cross-correlation: (Cin,D,H,W) x (Cout,Cin,kz,ky,kx)."""
    Cout, Cin, kz, ky, kx = w.shape
    if Cin != x.shape[0]:
        raise InvalidInputError(f"conv3d channel mismatch: x has {x.shape[0]}, w expects {Cin}")
    if kz % 2 == 0 or ky % 2 == 0 or kx % 2 == 0:
        raise InvalidInputError(f"conv3d needs odd kernel dims, got {(kz, ky, kx)}")
    pz, py, px = kz // 2, ky // 2, kx // 2
    xp = np.pad(x, ((0, 0), (pz, pz), (py, py), (px, px)))
    win = sliding_window_view(xp, (kz, ky, kx), axis=(1, 2, 3))
    out = np.tensordot(w, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    if b is not None:
        out = out + b[:, None, None, None]
    return np.ascontiguousarray(out)


def conv3d(x: Node, w: Node, b: Node | None = None) -> Node:
    inputs = (x, w) if b is None else (x, w, b)
    out = Node(conv3d_forward(x.value, w.value, None if b is None else b.value), "conv3d", inputs)

    def bwd(g):
        if w.requires_grad:
            kz, ky, kx = w.value.shape[2:]
            xp = np.pad(x.value, ((0, 0), (kz // 2, kz // 2), (ky // 2, ky // 2), (kx // 2, kx // 2)))
            win = sliding_window_view(xp, (kz, ky, kx), axis=(1, 2, 3))
            accumulate(w, np.tensordot(g, win, axes=([1, 2, 3], [1, 2, 3])))
        if x.requires_grad:
            wf = np.ascontiguousarray(w.value.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
            accumulate(x, conv3d_forward(g, wf))
        if b is not None and b.requires_grad:
            accumulate(b, g.sum(axis=(1, 2, 3)))

    out._backward = bwd if out.requires_grad else None
    return out


def avg_pool2_forward(x: np.ndarray):
    """2x downsampling average pool with ceil output dims; partial windows average
    over the voxels present. Returns (pooled, counts)."""
    C = x.shape[0]
    do, ho, wo = (-(-n // 2) for n in x.shape[1:])
    acc = np.zeros((C, do, ho, wo), x.dtype)
    cnt = np.zeros((do, ho, wo), x.dtype)
    for oz in (0, 1):
        for oy in (0, 1):
            for ox in (0, 1):
                s = x[:, oz::2, oy::2, ox::2]
                if 0 in s.shape:
                    continue
                acc[:, : s.shape[1], : s.shape[2], : s.shape[3]] += s
                cnt[: s.shape[1], : s.shape[2], : s.shape[3]] += 1
    return acc / cnt, cnt


def avg_pool2(x: Node) -> Node:
    pooled, cnt = avg_pool2_forward(x.value)
    out = Node(pooled, "avg_pool2", (x,))

    def bwd(g):
        gx = np.zeros(x.shape, g.dtype)
        gn = g / cnt
        for oz in (0, 1):
            for oy in (0, 1):
                for ox in (0, 1):
                    view = gx[:, oz::2, oy::2, ox::2]
                    if 0 in view.shape:
                        continue
                    view += gn[:, : view.shape[1], : view.shape[2], : view.shape[3]]
        accumulate(x, gx)

    out._backward = bwd if out.requires_grad else None
    return out


def convex_combine(w: Node, v: Node) -> Node:
    """Weighted sum of neighbor values: (Q,K) weights x (Q,K,C) values -> (Q,C)."""
    if w.value.ndim != 2 or v.value.ndim != 3 or w.shape != v.shape[:2]:
        raise InvalidInputError(f"convex_combine shapes {w.shape} and {v.shape} do not align")
    out = Node(np.einsum("qk,qkc->qc", w.value, v.value), "convex_combine", (w, v))

    def bwd(g):
        accumulate(w, np.einsum("qc,qkc->qk", g, v.value))
        accumulate(v, w.value[:, :, None] * g[:, None, :])

    out._backward = bwd if out.requires_grad else None
    return out


def diffusion_penalty(x: Node) -> Node:
    """Mean squared forward difference over all spatial axes of a (C,D,H,W) field."""
    if x.value.ndim != 4:
        raise InvalidInputError(f"diffusion_penalty expects (C,D,H,W), got {x.shape}")
    diffs = [np.diff(x.value, axis=ax) for ax in (1, 2, 3)]
    count = sum(d.size for d in diffs)
    if count == 0:
        raise InvalidInputError("field too small for finite differences")
    total = sum(float((d * d).sum()) for d in diffs)
    out = Node(np.asarray(total / count, x.value.dtype), "diffusion", (x,))

    def bwd(g):
        gx = np.zeros(x.shape, np.float64)
        scale = 2.0 * float(g) / count
        for ax, d in zip((1, 2, 3), diffs):
            gd = scale * d
            hi = [slice(None)] * 4
            lo = [slice(None)] * 4
            hi[ax] = slice(1, None)
            lo[ax] = slice(None, -1)
            gx[tuple(hi)] += gd
            gx[tuple(lo)] -= gd
        accumulate(x, gx.astype(x.value.dtype))

    out._backward = bwd if out.requires_grad else None
    return out
