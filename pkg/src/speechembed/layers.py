"""Trainable layers built on :mod:`speechembed.kernels`.

Each layer exposes ``forward(x, train=False)``; with ``train=True`` it keeps
what ``backward(grad)`` needs. ``backward`` returns the input gradient and
overwrites ``self.grads``. ``params`` holds the trainable arrays, ``buffers``
the frozen ones (batch-norm statistics); both are serialized.
"""

import numpy as np

from . import kernels as K


class Layer:
    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.grads = {}
        self._cache = None

    def tensors(self):
        return {**self.params, **self.buffers}

    def load(self, tensors):
        for name in list(self.params):
            self.params[name] = tensors[name]
        for name in list(self.buffers):
            self.buffers[name] = tensors[name]

    def param_count(self):
        return int(sum(a.size for a in self.tensors().values()))

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for name, a in d.items():
                if a.dtype.kind == "f":
                    d[name] = a.astype(dtype)
        return self

    def zero_grads(self):
        self.grads = {name: np.zeros_like(a) for name, a in self.params.items()}


class Conv(Layer):
    """Convolution (regular or depthwise), optional folded batch norm, activation."""

    def __init__(self, kernel, stride=1, act=None, bn=None, bias=None, depthwise=False,
                 padding="same"):
        super().__init__()
        self.stride = stride
        self.act = act
        self.depthwise = depthwise
        self.padding = padding
        self.params["kernel"] = kernel
        if bias is not None:
            self.params["bias"] = bias
        if bn is not None:
            for name in ("bn_mean", "bn_var", "bn_gamma", "bn_beta"):
                self.buffers[name] = bn[name]
        self.bn_eps = 1e-3

    @property
    def out_channels(self):
        k = self.params["kernel"]
        return k.shape[2] if self.depthwise else k.shape[3]

    def _scale_shift(self, dtype):
        if "bn_mean" not in self.buffers:
            return None, None
        b = self.buffers
        scale, shift = K.batchnorm_scale_shift(b["bn_mean"], b["bn_var"], b["bn_gamma"],
                                               b["bn_beta"], self.bn_eps)
        return scale.astype(dtype), shift.astype(dtype)

    def forward(self, x, train=False):
        k = self.params["kernel"]
        if self.depthwise:
            z = K.depthwise_conv2d(x, k, self.stride, self.padding)
        else:
            z = K.conv2d(x, k, self.stride, self.padding)
        if "bias" in self.params:
            z = z + self.params["bias"]
        scale, shift = self._scale_shift(z.dtype)
        if scale is not None:
            z = z * scale + shift
        fn, _ = K.ACTIVATIONS[self.act]
        if train:
            self._cache = (x, z)
        return fn(z)

    def backward(self, grad):
        x, z = self._cache
        _, dfn = K.ACTIVATIONS[self.act]
        gz = grad * dfn(z)
        scale, _ = self._scale_shift(gz.dtype)
        if scale is not None:
            gz = gz * scale
        k = self.params["kernel"]
        if self.depthwise:
            gx, gk = K.depthwise_conv2d_backward(x, k, gz, self.stride, self.padding)
        else:
            gx, gk = K.conv2d_backward(x, k, gz, self.stride, self.padding)
        self.grads = {"kernel": gk}
        if "bias" in self.params:
            self.grads["bias"] = gz.sum(axis=(0, 1, 2))
        self._cache = None
        return gx


class SqueezeExcite(Layer):
    def __init__(self, w1, b1, w2, b2):
        super().__init__()
        self.params.update(w1=w1, b1=b1, w2=w2, b2=b2)

    def forward(self, x, train=False):
        p = self.params
        s = K.global_avg_pool(x)
        pre1 = s @ p["w1"] + p["b1"]
        h = K.relu(pre1)
        pre2 = h @ p["w2"] + p["b2"]
        a = K.hard_sigmoid(pre2)
        if train:
            self._cache = (x, s, pre1, h, pre2, a)
        return x * a[:, None, None, :]

    def backward(self, grad):
        x, s, pre1, h, pre2, a = self._cache
        p = self.params
        gx = grad * a[:, None, None, :]
        ga = np.einsum("nhwc,nhwc->nc", grad, x)
        gpre2 = ga * K.hard_sigmoid_grad(pre2)
        gh = gpre2 @ p["w2"].T
        gpre1 = gh * K.relu_grad(pre1)
        gs = gpre1 @ p["w1"].T
        self.grads = {
            "w2": h.T @ gpre2, "b2": gpre2.sum(axis=0),
            "w1": s.T @ gpre1, "b1": gpre1.sum(axis=0),
        }
        gx += K.global_avg_pool_backward(x.shape, gs)
        self._cache = None
        return gx


class InvertedResidual(Layer):
    """Pointwise expand, depthwise, optional squeeze-excite, pointwise project."""

    def __init__(self, expand, depthwise, se, project, residual):
        super().__init__()
        self.sublayers = {"expand": expand, "dw": depthwise, "se": se, "project": project}
        self.residual = residual

    def _children(self):
        return [(name, l) for name, l in self.sublayers.items() if l is not None]

    def tensors(self):
        return {f"{name}.{k}": v for name, l in self._children() for k, v in l.tensors().items()}

    def load(self, tensors):
        for name, l in self._children():
            prefix = name + "."
            l.load({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})

    @property
    def params(self):
        return {f"{name}.{k}": v for name, l in self._children() for k, v in l.params.items()}

    @params.setter
    def params(self, value):
        pass  # composite: parameters live in the sublayers

    @property
    def grads(self):
        return {f"{name}.{k}": v for name, l in self._children() for k, v in l.grads.items()}

    @grads.setter
    def grads(self, value):
        pass

    def astype(self, dtype):
        for _, l in self._children():
            l.astype(dtype)
        return self

    def zero_grads(self):
        for _, l in self._children():
            l.zero_grads()

    def forward(self, x, train=False):
        y = x
        for _, l in self._children():
            y = l.forward(y, train)
        return y + x if self.residual else y

    def backward(self, grad):
        g = grad
        for _, l in reversed(self._children()):
            g = l.backward(g)
        return g + grad if self.residual else g


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        if train:
            self._cache = x.shape
        return K.global_avg_pool(x)

    def backward(self, grad):
        return K.global_avg_pool_backward(self._cache, grad)


class Flatten(Layer):
    def forward(self, x, train=False):
        if train:
            self._cache = x.shape
        return K.flatten_concat(x)

    def backward(self, grad):
        return K.unflatten(grad, self._cache)


class Dense(Layer):
    def __init__(self, kernel, bias):
        super().__init__()
        self.params.update(kernel=kernel, bias=bias)

    @property
    def shape(self):
        return self.params["kernel"].shape

    def forward(self, x, train=False):
        if train:
            self._cache = x
        return K.dense(x, self.params["kernel"], self.params["bias"])

    def backward(self, grad):
        gx, gw, gb = K.dense_backward(self._cache, self.params["kernel"], grad)
        self.grads = {"kernel": gw, "bias": gb}
        self._cache = None
        return gx
