"""Differentiable primitives: 3D convolution, activations, shape ops, losses.

Every op takes an optional `graph`; when given and any input requires grad,
the op appends a node with its backward rule. Forward math runs on plain
numpy arrays (float32 by default), with compiled kernels for convolution.

Reductions use a fixed order (x fastest, then y, z, channel; numpy pairwise
within an axis), so repeated runs are bitwise identical.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractViolation
from . import _kernels
from .tensor import Graph, Tensor

CE_CLAMP = 1e-12  # floor under log() in the cross-entropy term


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _maybe_record(graph: Graph | None, name, inputs, out: Tensor, backward_fn) -> Tensor:
    out.requires_grad = any(t.requires_grad for t in inputs)
    if graph is not None and out.requires_grad:
        graph.record(name, inputs, out, backward_fn)
    return out


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    c, d, h, w = x.shape
    out = np.zeros((c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, pad:pad + d, pad:pad + h, pad:pad + w] = x
    return out


def _conv_out_extent(n: int, pad: int, k: int, stride: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0, graph: Graph | None = None) -> Tensor:
    """Cross-correlation of a (Cin,D,H,W) input with a (Cout,Cin,k,k,k) kernel."""
    if x.data.ndim != 4:
        raise ContractViolation(f"conv3d input must be (C,D,H,W), got {x.shape}")
    if kernel.data.ndim != 5:
        raise ContractViolation(f"conv3d kernel must be (Cout,Cin,k,k,k), got {kernel.shape}")
    cout, cin, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k):
        raise ContractViolation(f"conv3d kernel must be cubic, got {kernel.shape}")
    if k % 2 != 1:
        raise ContractViolation(f"kernel extent must be odd, got {k}")
    if cin != x.shape[0]:
        raise ContractViolation(
            f"kernel expects {cin} input channels, input has {x.shape[0]}")
    if bias.shape != (cout,):
        raise ContractViolation(f"bias must have shape ({cout},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ContractViolation("stride must be >= 1 and padding >= 0")
    d, h, w = x.shape[1:]
    do, ho, wo = (_conv_out_extent(n, padding, k, stride) for n in (d, h, w))
    if min(do, ho, wo) < 1:
        raise ContractViolation(
            f"conv3d output would be empty for input {x.shape}, k={k}, "
            f"stride={stride}, padding={padding}")

    pointwise = (k == 1 and stride == 1 and padding == 0)
    xp = x.data if pointwise else _pad_spatial(x.data, padding)
    if pointwise:
        # channel mix: one GEMM beats a hand loop here
        out = kernel.data.reshape(cout, cin) @ xp.reshape(cin, -1)
        out += bias.data[:, None]
        out = out.reshape(cout, do, ho, wo)
    else:
        out = np.empty((cout, do, ho, wo), dtype=x.data.dtype)
        if k == 3 and stride == 1:
            _kernels.conv_fwd_k3s1(xp, kernel.data, bias.data, out)
        else:
            _kernels.conv_fwd_any(xp, kernel.data, bias.data, stride, out)
    result = Tensor(out, dtype=out.dtype)

    def bwd(g: np.ndarray):
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g.sum(axis=(1, 2, 3))
        if kernel.requires_grad:
            if pointwise:
                gw = (g.reshape(cout, -1) @ xp.reshape(cin, -1).T).reshape(kernel.shape)
            else:
                gw = np.empty_like(kernel.data)
                if k == 3 and stride == 1:
                    _kernels.conv_bwd_w_k3s1(xp, g, gw)
                else:
                    _kernels.conv_bwd_w_any(xp, g, stride, gw)
        if x.requires_grad:
            if pointwise:
                gx = (kernel.data.reshape(cout, cin).T @ g.reshape(cout, -1)).reshape(x.shape)
            elif k == 3 and stride == 1 and padding <= 2:
                # gradient w.r.t. input is correlation with the flipped kernel
                wflip = np.ascontiguousarray(
                    kernel.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gp = _pad_spatial(g, k - 1 - padding)
                gx = np.empty_like(x.data)
                _kernels.conv_fwd_k3s1(gp, wflip, np.zeros(cin, dtype=g.dtype), gx)
            else:
                gxp = np.zeros((cin, d + 2 * padding, h + 2 * padding, w + 2 * padding),
                               dtype=g.dtype)
                _kernels.conv_bwd_input_any(g, kernel.data, stride, gxp)
                gx = gxp[:, padding:padding + d, padding:padding + h, padding:padding + w]
                if padding:
                    gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    return _maybe_record(graph, "conv3d", (x, kernel, bias), result, bwd)


def leaky_relu(x: Tensor, negative_slope: float = 0.01,
               graph: Graph | None = None) -> Tensor:
    slope = x.data.dtype.type(negative_slope)
    flat = x.data.reshape(x.shape[0] if x.data.ndim > 1 else 1, -1)
    y = np.empty_like(x.data)
    factor = np.empty_like(x.data)
    _kernels.leaky_fwd(flat, slope, y.reshape(flat.shape), factor.reshape(flat.shape))
    out = Tensor(y)

    def bwd(g):
        return (g * factor,)

    return _maybe_record(graph, "leaky_relu", (x,), out, bwd)


def spatial_norm(x: Tensor, eps: float = 1e-5, graph: Graph | None = None) -> Tensor:
    """Normalize each channel to zero mean / unit variance over D,H,W."""
    if x.data.ndim != 4:
        raise ContractViolation(f"spatial_norm expects (C,D,H,W), got {x.shape}")
    dt = x.data.dtype
    c = x.shape[0]
    y = np.empty_like(x.data)
    inv = np.empty(c, dtype=dt)
    _kernels.norm_fwd(x.data.reshape(c, -1), dt.type(eps), y.reshape(c, -1), inv)
    out = Tensor(y)

    def bwd(g):
        gx = np.empty_like(g)
        _kernels.norm_bwd(g.reshape(c, -1), y.reshape(c, -1), inv, gx.reshape(c, -1))
        return (gx,)

    return _maybe_record(graph, "spatial_norm", (x,), out, bwd)


def avgpool2(x: Tensor, graph: Graph | None = None) -> Tensor:
    """Mean over non-overlapping 2x2x2 blocks; halves every spatial extent."""
    if x.data.ndim != 4:
        raise ContractViolation(f"avgpool2 expects (C,D,H,W), got {x.shape}")
    c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ContractViolation(f"avgpool2 needs even spatial extents, got {x.shape}")
    blocks = x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
    out = Tensor(blocks.mean(axis=(2, 4, 6)))
    inv = x.data.dtype.type(1.0 / 8.0)

    def bwd(g):
        g8 = g * inv
        return (g8.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3),)

    return _maybe_record(graph, "avgpool2", (x,), out, bwd)


def upsample_nearest(x: Tensor, graph: Graph | None = None) -> Tensor:
    """Nearest-neighbour doubling of all three spatial extents."""
    if x.data.ndim != 4:
        raise ContractViolation(f"upsample_nearest expects (C,D,H,W), got {x.shape}")
    y = x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    out = Tensor(y)
    c, d, h, w = x.shape

    def bwd(g):
        return (g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)),)

    return _maybe_record(graph, "upsample_nearest", (x,), out, bwd)


def concat_channels(tensors, graph: Graph | None = None) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractViolation("concat_channels needs at least one tensor")
    spatial = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != spatial:
            raise ContractViolation(
                f"concat_channels extent mismatch: {t.shape[1:]} vs {spatial}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=0))

    return _maybe_record(graph, "concat_channels", tuple(tensors), out, bwd)


def scale_channel(x: Tensor, channel_index: int, scalar,
                  graph: Graph | None = None) -> Tensor:
    """Multiply one channel by a scalar (a 1-element Tensor or a float)."""
    if not 0 <= channel_index < x.shape[0]:
        raise ContractViolation(
            f"channel index {channel_index} out of range for {x.shape[0]} channels")
    s = _as_tensor(scalar, x)
    if s.size != 1:
        raise ContractViolation(f"scale must be a scalar, got shape {s.shape}")
    sval = s.data.reshape(())
    y = x.data.copy()
    y[channel_index] = y[channel_index] * sval
    out = Tensor(y)

    def bwd(g):
        gx = gs = None
        if x.requires_grad:
            gx = g.copy()
            gx[channel_index] = gx[channel_index] * sval
        if s.requires_grad:
            gs = np.sum(g[channel_index] * x.data[channel_index]).reshape(s.shape)
        return gx, gs

    return _maybe_record(graph, "scale_channel", (x, s), out, bwd)


def take_scalar(x: Tensor, index: int, graph: Graph | None = None) -> Tensor:
    """Extract element `index` of a vector as a scalar tensor."""
    if x.data.ndim != 1:
        raise ContractViolation(f"take_scalar expects a vector, got {x.shape}")
    if not 0 <= index < x.size:
        raise ContractViolation(f"index {index} out of range for size {x.size}")
    out = Tensor(x.data[index].reshape(()))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _maybe_record(graph, "take_scalar", (x,), out, bwd)


def softmax(x: Tensor, axis: int = 0, graph: Graph | None = None) -> Tensor:
    """Numerically stable softmax along `axis` (max subtraction)."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ContractViolation(f"axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _maybe_record(graph, "softmax", (x,), out, bwd)


def reduce_sum(x: Tensor, graph: Graph | None = None) -> Tensor:
    out = Tensor(np.sum(x.data).reshape(()))

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _maybe_record(graph, "reduce_sum", (x,), out, bwd)


def add(a: Tensor, b: Tensor, graph: Graph | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return g, g

    return _maybe_record(graph, "add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor, graph: Graph | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return g * b.data, g * a.data

    return _maybe_record(graph, "mul", (a, b), out, bwd)


def dice_ce_loss(probs: Tensor, target: np.ndarray, class_count: int,
                 graph: Graph | None = None) -> Tensor:
    """Soft-Dice (smoothing 1.0) plus voxel cross-entropy, equally weighted.

    `probs` is (C,D,H,W) per-voxel class probabilities; `target` an integer
    label volume of shape (D,H,W).
    """
    if probs.shape[0] != class_count:
        raise ContractViolation(
            f"probs has {probs.shape[0]} channels, expected {class_count}")
    target = np.asarray(target)
    if target.shape != probs.shape[1:]:
        raise ContractViolation(
            f"target shape {target.shape} does not match probs spatial {probs.shape[1:]}")
    if target.min() < 0 or target.max() >= class_count:
        raise ContractViolation(
            f"target labels outside [0, {class_count}): saw "
            f"[{target.min()}, {target.max()}]")
    dt = probs.data.dtype
    smooth = dt.type(1.0)
    p = probs.data
    onehot = np.zeros_like(p)
    flat_idx = target.reshape(-1)
    onehot.reshape(class_count, -1)[flat_idx, np.arange(flat_idx.size)] = 1

    inter = np.sum(p.reshape(class_count, -1) * onehot.reshape(class_count, -1), axis=1)
    p_sum = np.sum(p.reshape(class_count, -1), axis=1)
    t_sum = np.sum(onehot.reshape(class_count, -1), axis=1)
    num = 2 * inter + smooth
    den = p_sum + t_sum + smooth
    dice_per_class = num / den
    dice_term = 1 - np.mean(dice_per_class)

    voxels = flat_idx.size
    p_true = p.reshape(class_count, -1)[flat_idx, np.arange(voxels)]
    clamped = np.maximum(p_true, dt.type(CE_CLAMP))
    ce_term = -np.mean(np.log(clamped))

    out = Tensor(np.asarray(dice_term + ce_term, dtype=dt).reshape(()))

    def bwd(g):
        gscal = g.reshape(())
        # dice: d/dp_cj of -(1/C) * (2*inter_c + s)/(den_c)
        coef_num = (2 / (class_count * den)).astype(dt)
        coef_den = (num / (class_count * den * den)).astype(dt)
        gp = (coef_den[:, None, None, None] - onehot * coef_num[:, None, None, None])
        # cross-entropy: d/dp_tj of -(1/M) log(max(p, clamp))
        live = (p_true > CE_CLAMP)
        ce_g = np.zeros(voxels, dtype=dt)
        ce_g[live] = -1.0 / (voxels * clamped[live])
        gp_flat = gp.reshape(class_count, -1)
        gp_flat[flat_idx, np.arange(voxels)] += ce_g
        return (gp * gscal,)

    return _maybe_record(graph, "dice_ce_loss", (probs,), out, bwd)
