"""Dense NHWC kernels and their backward passes.

Tensors are plain numpy arrays. Convolution kernels are HWIO, depthwise
kernels are ``(kh, kw, C)``. "same" padding pads symmetrically, putting the
odd pixel on the trailing side. Every kernel computes in the dtype of its
input, so the float path is float32 and gradient checks can run in float64.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError


def _same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _pad_spatial(x, kh, kw, stride, padding):
    if padding == "valid":
        return x, (0, 0, 0, 0)
    if padding != "same":
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")
    top, bottom = _same_pads(x.shape[1], kh, stride)
    left, right = _same_pads(x.shape[2], kw, stride)
    if top or bottom or left or right:
        x = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    return x, (top, bottom, left, right)


def _check_stride(stride):
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")


def _out_size(padded, k, stride):
    if padded < k:
        raise ShapeError(f"spatial extent {padded} is smaller than kernel extent {k}")
    return (padded - k) // stride + 1


def _patches(xp, kh, kw, stride):
    # (N, Ho, Wo, C, kh, kw) view
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x, kernel, stride=1, padding="same"):
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    _check_stride(stride)
    kh, kw, cin, cout = kernel.shape
    if kh == 1 and kw == 1 and stride == 1:
        return (x.reshape(-1, cin) @ kernel.reshape(cin, cout)).reshape(x.shape[:3] + (cout,))
    xp, _ = _pad_spatial(x, kh, kw, stride, padding)
    _out_size(xp.shape[1], kh, stride)
    _out_size(xp.shape[2], kw, stride)
    cols = _patches(xp, kh, kw, stride)
    n, ho, wo = cols.shape[:3]
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    return (cols @ kernel.reshape(kh * kw * cin, cout)).reshape(n, ho, wo, cout)


def conv2d_backward(x, kernel, grad_out, stride=1, padding="same"):
    """Return ``(grad_x, grad_kernel)`` for :func:`conv2d`."""
    kh, kw, cin, cout = kernel.shape
    if kh == 1 and kw == 1 and stride == 1:
        g = grad_out.reshape(-1, cout)
        gk = (x.reshape(-1, cin).T @ g).reshape(kernel.shape)
        gx = (g @ kernel.reshape(cin, cout).T).reshape(x.shape)
        return gx, gk
    xp, (top, _, left, _) = _pad_spatial(x, kh, kw, stride, padding)
    n, ho, wo, _ = grad_out.shape
    cols = _patches(xp, kh, kw, stride).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(n * ho * wo, kh * kw * cin)
    g = grad_out.reshape(n * ho * wo, cout)
    gk = (cols.T @ g).reshape(kernel.shape)
    gcols = (g @ kernel.reshape(kh * kw * cin, cout).T).reshape(n, ho, wo, kh, kw, cin)
    gxp = np.zeros(xp.shape, dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
    gx = gxp[:, top:top + x.shape[1], left:left + x.shape[2], :]
    return gx, gk


def depthwise_conv2d(x, kernel, stride=1, padding="same"):
    if x.ndim != 4 or kernel.ndim != 3 or x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    _check_stride(stride)
    kh, kw, _ = kernel.shape
    xp, _ = _pad_spatial(x, kh, kw, stride, padding)
    ho = _out_size(xp.shape[1], kh, stride)
    wo = _out_size(xp.shape[2], kw, stride)
    out = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=np.result_type(x, kernel))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] * kernel[i, j]
    return out


def depthwise_conv2d_backward(x, kernel, grad_out, stride=1, padding="same"):
    kh, kw, _ = kernel.shape
    xp, (top, _, left, _) = _pad_spatial(x, kh, kw, stride, padding)
    _, ho, wo, _ = grad_out.shape
    gk = np.empty_like(kernel)
    gxp = np.zeros(xp.shape, dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            gk[i, j] = np.einsum("nhwc,nhwc->c", xp[sl], grad_out)
            gxp[sl] += grad_out * kernel[i, j]
    gx = gxp[:, top:top + x.shape[1], left:left + x.shape[2], :]
    return gx, gk


def dense(x, W, b=None):
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        bshape = None if b is None else b.shape
        raise ShapeError(f"dense: input {x.shape} incompatible with kernel {W.shape} / bias {bshape}")
    y = x @ W
    return y if b is None else y + b


def dense_backward(x, W, grad_out):
    """Return ``(grad_x, grad_W, grad_b)``; leading axes of ``x`` are batch axes."""
    x2 = x.reshape(-1, W.shape[0])
    g2 = grad_out.reshape(-1, W.shape[1])
    return (g2 @ W.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x):
    return (x > 0).astype(x.dtype)


def hard_sigmoid(x):
    return np.clip(x + 3, 0, 6) / 6


def hard_sigmoid_grad(x):
    return ((x > -3) & (x < 3)).astype(x.dtype) / 6


def hard_swish(x):
    return x * np.clip(x + 3, 0, 6) / 6


def hard_swish_grad(x):
    g = (2 * x + 3) / 6
    return np.where(x <= -3, 0, np.where(x >= 3, 1, g)).astype(x.dtype)


def identity(x):
    return x


def identity_grad(x):
    return np.ones_like(x)


ACTIVATIONS = {
    "relu": (relu, relu_grad),
    "hswish": (hard_swish, hard_swish_grad),
    "hsigmoid": (hard_sigmoid, hard_sigmoid_grad),
    None: (identity, identity_grad),
}


def batchnorm_fold(x, mean, var, gamma, beta, eps=1e-3):
    """Inference-mode batch norm over the trailing channel axis."""
    scale, shift = batchnorm_scale_shift(mean, var, gamma, beta, eps)
    return x * scale.astype(x.dtype) + shift.astype(x.dtype)


def batchnorm_scale_shift(mean, var, gamma, beta, eps=1e-3):
    scale = gamma / np.sqrt(var + eps)
    return scale, beta - mean * scale


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NHWC, got {x.shape}")
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(shape, grad_out):
    n, h, w, c = shape
    return np.broadcast_to(grad_out[:, None, None, :] / (h * w), shape).copy()


def flatten_concat(x):
    if x.ndim != 4:
        raise ShapeError(f"flatten_concat expects NHWC, got {x.shape}")
    return x.reshape(x.shape[0], -1)


def unflatten(flat, shape):
    return flat.reshape(shape)
