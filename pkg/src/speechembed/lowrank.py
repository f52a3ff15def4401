"""Low-rank bottleneck compression.

During training the layer computes ``y = x (lam*W + (1 - lam) U V^T) + b``
with ``lam`` annealed linearly from 1 to 0. At inference ``lam`` is pinned to
0 and ``W`` is dropped, leaving ``k (m + n) + n`` stored weights.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import kernels as K
from . import quant
from .errors import ConfigError, RankError, ScheduleError, ShapeError
from .layers import Layer

DEFAULT_RANK = 100


def truncated_svd(W, k):
    """Best rank-``k`` factors ``(U, V)`` of ``W`` with ``U @ V.T ~ W``.

    Singular values are folded into ``U``. The factorization goes through the
    symmetric eigenproblem of the smaller Gram matrix, keeping only the top
    ``k`` eigenpairs, so a 2048x2048 kernel factors in about a second.
    """
    W = np.asarray(W)
    if W.ndim != 2:
        raise ShapeError(f"truncated_svd expects a matrix, got shape {W.shape}")
    m, n = W.shape
    if not 1 <= k <= min(m, n):
        raise RankError(f"rank k={k} must lie in [1, min(m, n)={min(m, n)}]")
    A = W.astype(np.float64)
    if n <= m:
        gram = A.T @ A
        _, vecs = scipy.linalg.eigh(gram, subset_by_index=[n - k, n - 1])
        V = vecs[:, ::-1]
        U = A @ V
    else:
        gram = A @ A.T
        vals, vecs = scipy.linalg.eigh(gram, subset_by_index=[m - k, m - 1])
        left = vecs[:, ::-1]
        sigma = np.sqrt(np.clip(vals[::-1], 0.0, None))
        proj = A.T @ left  # columns are sigma_i * v_i
        with np.errstate(divide="ignore", invalid="ignore"):
            V = np.where(sigma > 0, proj / sigma, 0.0)
        U = left * sigma
    # contiguous copies: BLAS may round differently on strided views, which
    # would break bit-exact agreement with a reloaded model
    return np.ascontiguousarray(U, dtype=W.dtype), np.ascontiguousarray(V, dtype=W.dtype)


@dataclass(frozen=True)
class CompressionSchedule:
    steps_per_epoch: int
    anneal_epochs: int = 10

    def __post_init__(self):
        if self.anneal_epochs < 1:
            raise ConfigError("anneal_epochs must be >= 1")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    @property
    def span(self):
        return self.anneal_epochs * self.steps_per_epoch


def lambda_at(schedule, step):
    return max(0.0, 1.0 - step / schedule.span)


class LowRankDense(Layer):
    """Dense layer mixing a full kernel with its low-rank factors."""

    def __init__(self, U, V, b, W=None, lam=None, train_full_kernel=True):
        super().__init__()
        if U.shape[1] != V.shape[1] or V.shape[0] != b.shape[0]:
            raise ShapeError(f"factor shapes U {U.shape}, V {V.shape}, b {b.shape} disagree")
        if W is not None and W.shape != (U.shape[0], V.shape[0]):
            raise ShapeError(f"kernel {W.shape} does not match factors U {U.shape}, V {V.shape}")
        self.params.update(U=U, V=V, bias=b)
        if W is not None:
            self.params["kernel"] = W
        self.lam = (1.0 if W is not None else 0.0) if lam is None else float(lam)
        self.train_full_kernel = train_full_kernel
        self.qat = False
        self._check_lambda()

    @classmethod
    def from_kernel(cls, W, b, k=DEFAULT_RANK, **kw):
        U, V = truncated_svd(W, k)
        return cls(U, V, b, W=W, lam=1.0, **kw)

    @property
    def W(self):
        return self.params.get("kernel")

    @property
    def U(self):
        return self.params["U"]

    @property
    def V(self):
        return self.params["V"]

    @property
    def b(self):
        return self.params["bias"]

    @property
    def k(self):
        return self.U.shape[1]

    @property
    def shape(self):
        return self.U.shape[0], self.V.shape[0]

    @property
    def finalized(self):
        return self.W is None

    def _check_lambda(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ScheduleError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.lam > 0 and self.W is None:
            raise ScheduleError("lambda > 0 requires the full kernel, which was discarded")

    def _mats(self):
        if not self.qat:
            return self.W, self.U, self.V
        fq = [None if a is None else quant.fake_quant(a, quant.choose_scale(a))
              for a in (self.W, self.U, self.V)]
        return tuple(fq)

    def forward(self, x, train=False):
        self._check_lambda()
        W, U, V = self._mats()
        y = _mix(x, self.lam, W, U, V, self.b)
        if train:
            self._cache = (x, W, U, V)
        return y

    def backward(self, grad):
        x, W, U, V = self._cache
        grads, gx = _mix_grads(x, grad, self.lam, W, U, V)
        if self.qat:
            for name, src in (("kernel", self.W), ("U", self.U), ("V", self.V)):
                if name in grads:
                    grads[name] = grads[name] * quant.fake_quant_grad(src, quant.choose_scale(src))
        if "kernel" in grads and not self.train_full_kernel:
            grads["kernel"] = np.zeros_like(grads["kernel"])
        self.grads = grads
        self._cache = None
        return gx

    def param_count(self):
        return int(sum(a.size for a in self.params.values()))


def _mix(x, lam, W, U, V, b):
    if lam == 1.0:
        return K.dense(x, W, b)
    low = (x @ U) @ V.T
    if lam == 0.0:
        return low + b
    return lam * (x @ W) + (1.0 - lam) * low + b


def _mix_grads(x, g, lam, W, U, V):
    x2 = x.reshape(-1, U.shape[0])
    g2 = g.reshape(-1, V.shape[0])
    gV_proj = g2 @ V
    grads = {
        "U": (1.0 - lam) * (x2.T @ gV_proj),
        "V": (1.0 - lam) * (g2.T @ (x2 @ U)),
        "bias": g2.sum(axis=0),
    }
    gx = (1.0 - lam) * (gV_proj @ U.T)
    if W is not None:
        grads["kernel"] = lam * (x2.T @ g2)
        gx = gx + lam * (g2 @ W.T)
    return grads, gx.reshape(x.shape)


def mixed_forward(layer, x):
    return layer.forward(x)


def factor_gradients(layer, x, upstream_grad):
    """Analytic gradients of ``mixed_forward`` w.r.t. U, V, b and (while lam>0) W."""
    x = np.asarray(x)
    g = np.asarray(upstream_grad)
    m, n = layer.shape
    if x.shape[-1] != m or g.shape[-1] != n or x.shape[:-1] != g.shape[:-1]:
        raise ShapeError(f"input {x.shape} and upstream gradient {g.shape} do not fit layer {m}x{n}")
    grads, _ = _mix_grads(x, g, layer.lam, layer.W, layer.U, layer.V)
    return grads


def finalize(layer):
    """Pin lambda to 0 and drop the full kernel. Idempotent."""
    return LowRankDense(layer.U, layer.V, layer.b, W=None, lam=0.0,
                        train_full_kernel=layer.train_full_kernel)
