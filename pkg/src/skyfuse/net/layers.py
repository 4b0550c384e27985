"""Batched numpy layers with explicit backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes ``(dout, cache)`` and returns the input gradient followed by parameter
gradients. Leading axes are batch axes unless stated otherwise.
"""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5
MASK_VALUE = -1e9


# numpy reductions over a short trailing axis are slow; these two helpers
# replace them on the hot path (a ones-column matmul and an unrolled maximum).


def rowsum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims."""
    return x @ np.ones((x.shape[-1], 1), dtype=x.dtype)


def rowmax(x: np.ndarray) -> np.ndarray:
    """Max over the last axis, keepdims."""
    n = x.shape[-1]
    if n > 64:
        return np.max(x, axis=-1, keepdims=True)
    m = x[..., 0].copy()
    for j in range(1, n):
        np.maximum(m, x[..., j], out=m)
    return m[..., None]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits)
    if axis not in (-1, logits.ndim - 1):
        logits = np.moveaxis(logits, axis, -1)
        return np.moveaxis(softmax(logits), -1, axis)
    e = np.exp(logits - rowmax(logits))
    return e / rowsum(e)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits)
    if axis not in (-1, logits.ndim - 1):
        logits = np.moveaxis(logits, axis, -1)
        return np.moveaxis(log_softmax(logits), -1, axis)
    z = logits - rowmax(logits)
    return z - np.log(rowsum(np.exp(z)))


def layer_norm(v, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    return layer_norm_forward(np.asarray(v, dtype=np.float64), gain, bias, eps)[0]


def layer_norm_forward(x, gain, bias, eps: float = LN_EPS):
    n = x.shape[-1]
    xc = x - rowsum(x) / n
    var = rowsum(xc * xc) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    xhat, inv, gain = cache
    n = xhat.shape[-1]
    batch_axes = tuple(range(dout.ndim - 1))
    dgain = np.sum(dout * xhat, axis=batch_axes)
    dbias = np.sum(dout, axis=batch_axes)
    dxhat = dout * gain
    dx = (inv / n) * (n * dxhat - rowsum(dxhat) - xhat * rowsum(dxhat * xhat))
    return dx, dgain, dbias


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dout, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ w.T, x2.T @ d2, d2.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0.0


def relu_backward(dout, mask):
    return dout * mask


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_forward(x):
    """tanh-approximation GELU (smooth, so finite differences behave)."""
    inner = _GELU_C * x * (1.0 + 0.044715 * x * x)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dout, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# -- convolution (NHWC, valid padding) ------------------------------------


def conv2d_forward(x, w, b, kernel: int, stride: int):
    """``x``: (B, H, W, C); ``w``: (kernel*kernel*C, C_out) in (ky, kx, c) order."""
    bsz, h, wd, c = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, C, ky, kx)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz, ho, wo, kernel * kernel * c)
    return cols @ w + b, (cols, x.shape, kernel, stride)


def conv2d_backward(dout, cache, w):
    cols, xshape, kernel, stride = cache
    bsz, h, wd, c = xshape
    ho, wo = dout.shape[1], dout.shape[2]
    dw = cols.reshape(-1, cols.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    dcols = (dout @ w.T).reshape(bsz, ho, wo, kernel, kernel, c)
    dx = np.zeros(xshape, dtype=dout.dtype)
    for ky in range(kernel):
        for kx in range(kernel):
            dx[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :] += dcols[
                :, :, :, ky, kx, :
            ]
    return dx, dw, db


def conv_out(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


# -- shifted-window multi-head attention ----------------------------------


def window_partition(x, window: int):
    """(B, G, G, D) -> (B, nW, window*window, D), windows in row-major order."""
    bsz, g, _, d = x.shape
    n = g // window
    x = x.reshape(bsz, n, window, n, window, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(bsz, n * n, window * window, d)


def window_reverse(xw, window: int, grid: int):
    bsz, _, _, d = xw.shape
    n = grid // window
    x = xw.reshape(bsz, n, n, window, window, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(bsz, grid, grid, d)


def shift_mask(grid: int, window: int, shift: int) -> np.ndarray:
    """Additive (nW, N, N) mask keeping cyclically wrapped regions apart."""
    region = np.zeros((grid, grid), dtype=np.int64)
    bounds = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    r = 0
    for hs in bounds:
        for ws in bounds:
            region[hs, ws] = r
            r += 1
    rw = window_partition(region[None, :, :, None], window)[0, :, :, 0]  # (nW, N)
    differ = rw[:, :, None] != rw[:, None, :]
    return np.where(differ, MASK_VALUE, 0.0)


def window_attention_forward(x, p: dict, window: int, heads: int, shift: int = 0, mask=None):
    """Multi-head self-attention inside (optionally cyclically shifted) windows.

    ``x`` is (B, G, G, D) and is not normalized here; the caller owns the
    pre-norm and the residual. ``p`` holds ``qkv_w``, ``qkv_b``, ``proj_w``,
    ``proj_b``. ``mask`` is an additive (nW, N, N) array or None.
    """
    bsz, grid, _, d = x.shape
    dh = d // heads
    if shift:
        x = np.roll(x, (-shift, -shift), axis=(1, 2))
    xw = window_partition(x, window)  # (B, nW, N, D)
    nw, n = xw.shape[1], xw.shape[2]
    qkv = xw @ p["qkv_w"] + p["qkv_b"]
    qkv = qkv.reshape(bsz, nw, n, 3, heads, dh).transpose(3, 0, 1, 4, 2, 5)
    q, k, v = qkv[0], qkv[1], qkv[2]  # (B, nW, h, N, dh)
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ k.swapaxes(-1, -2)) * scale
    if mask is not None:
        scores = scores + mask[None, :, None, :, :].astype(scores.dtype, copy=False)
    attn = softmax(scores)
    o = attn @ v  # (B, nW, h, N, dh)
    o = o.transpose(0, 1, 3, 2, 4).reshape(bsz, nw, n, d)
    out = o @ p["proj_w"] + p["proj_b"]
    y = window_reverse(out, window, grid)
    if shift:
        y = np.roll(y, (shift, shift), axis=(1, 2))
    cache = (xw, q, k, v, attn, o, scale, window, heads, shift, grid)
    return y, cache


def window_attention_backward(dy, cache, p: dict):
    xw, q, k, v, attn, o, scale, window, heads, shift, grid = cache
    bsz, nw, n, d = xw.shape
    dh = d // heads
    if shift:
        dy = np.roll(dy, (-shift, -shift), axis=(1, 2))
    dout = window_partition(dy, window)
    grads = {
        "proj_w": o.reshape(-1, d).T @ dout.reshape(-1, d),
        "proj_b": dout.reshape(-1, d).sum(axis=0),
    }
    do = (dout @ p["proj_w"].T).reshape(bsz, nw, n, heads, dh).transpose(0, 1, 3, 2, 4)
    dattn = do @ v.swapaxes(-1, -2)
    dv = attn.swapaxes(-1, -2) @ do
    dscores = attn * (dattn - rowsum(dattn * attn)) * scale
    dq = dscores @ k
    dk = dscores.swapaxes(-1, -2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 2, 4, 0, 3, 5).reshape(bsz, nw, n, 3 * d)
    grads["qkv_w"] = xw.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
    grads["qkv_b"] = dqkv.reshape(-1, 3 * d).sum(axis=0)
    dxw = dqkv @ p["qkv_w"].T
    dx = window_reverse(dxw, window, grid)
    if shift:
        dx = np.roll(dx, (shift, shift), axis=(1, 2))
    return dx, grads
