"""Dense array kernels with analytic backward passes.

Arrays are plain ``numpy.ndarray`` in NCHW (2-D) or NCTHW (3-D) layout; a
leading batch axis is optional everywhere. Convolutions are stride 1 with
zero "same" padding and odd kernels only.

The 2-D convolution lowers row blocks of the padded input to columns
(``im2col``) and issues one GEMM per block. Input channels that are
identically zero (empty hidden state, inactive one-hot planes) are dropped
before lowering, which is exact.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

# column-buffer budget per GEMM, in elements
_COL_BUDGET = 1 << 22


class ConvKernel(NamedTuple):
    """Weights (out, in, kH, kW) or (out, in, kT, kH, kW) and optional bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


def _check_kernel(w, ndim):
    if w.ndim != ndim + 2:
        raise ValueError(f"expected a {ndim + 2}-D kernel, got shape {w.shape}")
    if any(k % 2 == 0 for k in w.shape[2:]):
        raise ValueError(f"kernel dimensions must be odd for same padding, got {w.shape[2:]}")


def _batched(x, ndim):
    if x.ndim == ndim + 1:
        return x[None], True
    if x.ndim == ndim + 2:
        return x, False
    raise ValueError(f"expected {ndim + 1}-D or {ndim + 2}-D input, got shape {x.shape}")


def _active_channels(x):
    """Indices of channels holding any nonzero value across the batch."""
    B, C = x.shape[:2]
    return np.flatnonzero(x.reshape(B, C, -1).any(axis=(0, 2)))


def _row_blocks(H, K, W):
    step = max(1, min(H, _COL_BUDGET // max(1, K * W)))
    return [(r, min(H, r + step)) for r in range(0, H, step)]


def _fill_cols(cols, xp, r0, r1, kh, kw, W):
    # cols: (C, kh, kw, r1-r0, W) view; ordering matches w.reshape(M, C*kh*kw)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, dy, dx] = xp[:, r0 + dy:r1 + dy, dx:dx + W]


def _pad2d(x, ph, pw):
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + H, pw:pw + W] = x
    return xp


def conv2d_same(x: np.ndarray, kernel) -> np.ndarray:
    """Stride-1 2-D convolution with zero same padding.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``kernel`` a :class:`ConvKernel`
    or ``(weights, bias)`` pair. Returns (C_out, H, W) or (B, C_out, H, W).
    """
    w, b = kernel
    _check_kernel(w, 2)
    x, squeeze = _batched(np.asarray(x), 2)
    B, C, H, W = x.shape
    M, Cw, kh, kw = w.shape
    if Cw != C:
        raise ValueError(f"kernel expects {Cw} input channels, input has {C}")
    dtype = np.result_type(x, w)
    out = np.empty((B, M, H, W), dtype=dtype)
    active = _active_channels(x)
    if len(active) < C:
        x = x[:, active]
        w = w[:, active]
    C = len(active)
    if C == 0:
        out[...] = 0
    else:
        wm = np.ascontiguousarray(w, dtype=dtype).reshape(M, C * kh * kw)
        xp = _pad2d(x.astype(dtype, copy=False), kh // 2, kw // 2)
        flat = out.reshape(B, M, H * W)
        blocks = _row_blocks(H, C * kh * kw, W)
        buf = np.empty(C * kh * kw * (blocks[0][1] - blocks[0][0]) * W, dtype=dtype)
        for bi in range(B):
            for r0, r1 in blocks:
                n = (r1 - r0) * W
                cols = buf[:C * kh * kw * n].reshape(C, kh, kw, r1 - r0, W)
                _fill_cols(cols, xp[bi], r0, r1, kh, kw, W)
                np.matmul(wm, cols.reshape(C * kh * kw, n), out=flat[bi, :, r0 * W:r1 * W])
    if b is not None:
        out += np.asarray(b, dtype=dtype)[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_weight_grad(grad_out: np.ndarray, x: np.ndarray, kshape) -> np.ndarray:
    """Gradient of a same convolution w.r.t. its weights of shape ``kshape``."""
    x, _ = _batched(np.asarray(x), 2)
    g, _ = _batched(np.asarray(grad_out), 2)
    B, C, H, W = x.shape
    M, _, kh, kw = kshape
    dtype = np.result_type(x, g)
    dw = np.zeros((M, C, kh, kw), dtype=dtype)
    active = _active_channels(x)
    Ca = len(active)
    if Ca == 0:
        return dw
    xa = x[:, active] if Ca < C else x
    xp = _pad2d(xa.astype(dtype, copy=False), kh // 2, kw // 2)
    gflat = g.astype(dtype, copy=False).reshape(B, M, H * W)
    acc = np.zeros((M, Ca * kh * kw), dtype=dtype)
    blocks = _row_blocks(H, Ca * kh * kw, W)
    buf = np.empty(Ca * kh * kw * (blocks[0][1] - blocks[0][0]) * W, dtype=dtype)
    for bi in range(B):
        for r0, r1 in blocks:
            n = (r1 - r0) * W
            cols = buf[:Ca * kh * kw * n].reshape(Ca, kh, kw, r1 - r0, W)
            _fill_cols(cols, xp[bi], r0, r1, kh, kw, W)
            acc += gflat[bi, :, r0 * W:r1 * W] @ cols.reshape(Ca * kh * kw, n).T
    dw[:, active] = acc.reshape(M, Ca, kh, kw)
    return dw


def conv2d_input_grad(grad_out: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of a same convolution w.r.t. its input.

    With odd kernels this is the same convolution of ``grad_out`` with the
    spatially flipped, channel-transposed kernel.
    """
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return conv2d_same(grad_out, (wt, None))


def conv2d_same_backward(grad_out: np.ndarray, x: np.ndarray, kernel, need_input: bool = True):
    """Returns ``(grad_input, grad_weights, grad_bias)``; grad_input is None
    when ``need_input`` is false. Bias gradient is None for bias-free kernels."""
    w, b = kernel
    g = np.asarray(grad_out)
    if g.shape[-2:] != np.shape(x)[-2:] or g.shape[-3] != w.shape[0]:
        raise ValueError(f"grad_out shape {g.shape} inconsistent with input {np.shape(x)} / kernel {w.shape}")
    axes = (0, 2, 3) if g.ndim == 4 else (1, 2)
    db = g.sum(axis=axes) if b is not None else None
    dw = conv2d_weight_grad(g, x, w.shape)
    dx = conv2d_input_grad(g, w) if need_input else None
    return dx, dw, db


def conv3d_same(x: np.ndarray, kernel) -> np.ndarray:
    """Stride-1 3-D convolution with zero same padding on T, H and W.

    ``x`` is (C_in, T, H, W) or (B, C_in, T, H, W). Each temporal tap is a
    2-D same convolution, so this shares the optimized 2-D path.
    """
    w, b = kernel
    _check_kernel(w, 3)
    x, squeeze = _batched(np.asarray(x), 3)
    B, C, T, H, W = x.shape
    M, Cw, kt = w.shape[:3]
    if Cw != C:
        raise ValueError(f"kernel expects {Cw} input channels, input has {C}")
    dtype = np.result_type(x, w)
    pt = kt // 2
    # (B, T, C, H, W) so that each frame is a contiguous 2-D batch element
    frames = np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4))
    out = np.zeros((B, M, T, H, W), dtype=dtype)
    for t in range(T):
        for a in range(kt):
            src = t + a - pt
            if 0 <= src < T:
                out[:, :, t] += conv2d_same(frames[:, src], (w[:, :, a], None))
    if b is not None:
        out += np.asarray(b, dtype=dtype)[None, :, None, None, None]
    return out[0] if squeeze else out


def conv3d_same_backward(grad_out: np.ndarray, x: np.ndarray, kernel, need_input: bool = True):
    w, b = kernel
    x, squeeze = _batched(np.asarray(x), 3)
    g, _ = _batched(np.asarray(grad_out), 3)
    B, C, T, H, W = x.shape
    kt = w.shape[2]
    pt = kt // 2
    dtype = np.result_type(x, w, g)
    db = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
    frames = np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4))
    gframes = np.ascontiguousarray(g.transpose(0, 2, 1, 3, 4))
    dw = np.zeros(w.shape, dtype=dtype)
    dx = np.zeros((B, T, C, H, W), dtype=dtype) if need_input else None
    for t in range(T):
        for a in range(kt):
            src = t + a - pt
            if 0 <= src < T:
                dw[:, :, a] += conv2d_weight_grad(gframes[:, t], frames[:, src], w[:, :, a].shape)
                if need_input:
                    dx[:, src] += conv2d_input_grad(gframes[:, t], w[:, :, a])
    if need_input:
        dx = dx.transpose(0, 2, 1, 3, 4)
        dx = dx[0] if squeeze else np.ascontiguousarray(dx)
    return dx, dw, db


# ---------------------------------------------------------------------------
# activations and elementwise algebra

ACTIVATIONS = ("sigmoid", "tanh", "relu")


def sigmoid(x, out=None):
    # 0.5*tanh(x/2)+0.5 is overflow-free and several times faster than expit
    out = np.asarray(np.multiply(x, 0.5, out=out))
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def apply_activation(x: np.ndarray, kind: str, out=None) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(x, out=out)
    if kind == "tanh":
        return np.tanh(x, out=out)
    if kind == "relu":
        return np.maximum(x, 0, out=out)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(grad: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """Gradient through an activation given its *output* ``y``."""
    if kind == "sigmoid":
        return grad * y * (1 - y)
    if kind == "tanh":
        return grad * (1 - y * y)
    if kind == "relu":
        return grad * (y > 0)
    raise ValueError(f"unknown activation {kind!r}")


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    try:
        return _OPS[op](a, b)
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None


def elementwise_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray, op: str):
    """Returns ``(grad_a, grad_b)``."""
    if op == "add":
        return grad, grad
    if op == "sub":
        return grad, -grad
    if op == "mul":
        return grad * b, grad * a
    raise ValueError(f"unknown op {op!r}")


def glorot_uniform(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    """Glorot/Xavier uniform for conv kernels (out, in, *k)."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
