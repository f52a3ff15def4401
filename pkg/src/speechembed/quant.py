"""Symmetric per-tensor int8 weight quantization for the bottleneck kernel.

Only weights are quantized; activations stay in float. Training uses
fake quantization with a straight-through gradient that is zero outside the
representable range.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ConfigError, ShapeError
from .layers import Layer

QMAX = 127


@dataclass(frozen=True)
class QuantSpec:
    scale: float
    num_bits: int = 8
    zero_point: int = 0

    def __post_init__(self):
        if self.num_bits != 8:
            raise ConfigError(f"only 8-bit quantization is supported, got {self.num_bits}")
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.zero_point != 0:
            raise ConfigError("symmetric scheme requires zero_point = 0")

    @property
    def scheme(self):
        return "symmetric-per-tensor"


def choose_scale(W):
    peak = float(np.max(np.abs(W))) if np.size(W) else 0.0
    if peak == 0:
        return QuantSpec(scale=1.0)
    # stored as f32 in model files, so keep it f32-representable
    scale = max(float(np.float32(peak / QMAX)), float(np.finfo(np.float32).smallest_subnormal))
    return QuantSpec(scale=scale)


def quantize(W, spec):
    scale = np.asarray(spec.scale, dtype=np.asarray(W).dtype)
    return np.round(np.clip(W / scale, -QMAX, QMAX)).astype(np.int8)


def dequantize(q, spec, dtype=np.float32):
    return q.astype(dtype) * np.asarray(spec.scale, dtype=dtype)


def fake_quant(W, spec):
    W = np.asarray(W)
    return dequantize(quantize(W, spec), spec, W.dtype)


def fake_quant_grad(W, spec):
    """Straight-through mask: 1 inside the clamp range, 0 outside."""
    r = np.abs(np.asarray(W) / spec.scale)
    # slack for the f32 rounding of the scale, so the peak weight stays inside
    return (r <= QMAX * (1 + 1e-6)).astype(np.asarray(W).dtype)


class QATDense(Layer):
    """Float dense layer whose kernel is fake-quantized while ``qat`` is on."""

    def __init__(self, kernel, bias):
        super().__init__()
        self.params.update(kernel=kernel, bias=bias)
        self.qat = False

    @property
    def shape(self):
        return self.params["kernel"].shape

    def effective_kernel(self):
        W = self.params["kernel"]
        return fake_quant(W, choose_scale(W)) if self.qat else W

    def forward(self, x, train=False):
        W = self.effective_kernel()
        if train:
            self._cache = (x, W)
        return K.dense(x, W, self.params["bias"])

    def backward(self, grad):
        x, W = self._cache
        gx, gw, gb = K.dense_backward(x, W, grad)
        if self.qat:
            src = self.params["kernel"]
            gw = gw * fake_quant_grad(src, choose_scale(src))
        self.grads = {"kernel": gw, "bias": gb}
        self._cache = None
        return gx


class QuantizedDense(Layer):
    """Inference-only dense layer holding an int8 kernel and one float scale."""

    def __init__(self, q_kernel, spec, bias):
        super().__init__()
        q_kernel = np.asarray(q_kernel)
        if q_kernel.dtype != np.int8:
            raise ConfigError(f"q_kernel must be int8, got {q_kernel.dtype}")
        if q_kernel.ndim != 2 or bias.shape != (q_kernel.shape[1],):
            raise ShapeError(f"kernel {q_kernel.shape} does not match bias {bias.shape}")
        if np.any(q_kernel == -128):
            raise ConfigError("q_kernel entries must lie in [-127, 127]")
        self.buffers["kernel"] = q_kernel
        self.params["bias"] = bias
        self.spec = spec

    @property
    def q_kernel(self):
        return self.buffers["kernel"]

    @property
    def b(self):
        return self.params["bias"]

    @property
    def shape(self):
        return self.q_kernel.shape

    def scales(self):
        return {"kernel": self.spec.scale}

    def forward(self, x, train=False):
        return int_forward(self, x)


def quantize_layer(W, b):
    spec = choose_scale(W)
    return QuantizedDense(quantize(W, spec), spec, np.asarray(b))


def int_forward(q, x):
    """``x @ (q_kernel * scale) + b``, scaling the product instead of the kernel."""
    if x.shape[-1] != q.shape[0]:
        raise ShapeError(f"int_forward: input {x.shape} incompatible with kernel {q.shape}")
    acc = x @ q.q_kernel.astype(x.dtype)
    return acc * np.asarray(q.spec.scale, dtype=x.dtype) + q.b.astype(x.dtype)


class QuantizedLowRankDense(Layer):
    """Finalized low-rank layer with int8 factors, each with its own scale."""

    def __init__(self, q_u, u_spec, q_v, v_spec, bias):
        super().__init__()
        if q_u.dtype != np.int8 or q_v.dtype != np.int8:
            raise ConfigError("factors must be int8")
        if q_u.shape[1] != q_v.shape[1] or q_v.shape[0] != bias.shape[0]:
            raise ShapeError(f"factor shapes {q_u.shape}, {q_v.shape}, bias {bias.shape} disagree")
        self.buffers.update(U=q_u, V=q_v)
        self.params["bias"] = bias
        self.u_spec = u_spec
        self.v_spec = v_spec

    @classmethod
    def from_factors(cls, U, V, b):
        us, vs = choose_scale(U), choose_scale(V)
        return cls(quantize(U, us), us, quantize(V, vs), vs, np.asarray(b))

    @property
    def shape(self):
        return self.buffers["U"].shape[0], self.buffers["V"].shape[0]

    @property
    def k(self):
        return self.buffers["U"].shape[1]

    def scales(self):
        return {"U": self.u_spec.scale, "V": self.v_spec.scale}

    def forward(self, x, train=False):
        dt = x.dtype
        h = (x @ self.buffers["U"].astype(dt)) * np.asarray(self.u_spec.scale, dtype=dt)
        y = (h @ self.buffers["V"].astype(dt).T) * np.asarray(self.v_spec.scale, dtype=dt)
        return y + self.params["bias"].astype(dt)
