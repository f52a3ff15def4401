"""Distillation training: student + head regress teacher targets under MSE."""

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import ConfigError, DivergenceError, ShapeError
from .frontend import LogMelSpectrogram
from .lowrank import CompressionSchedule, LowRankDense, finalize, lambda_at
from .quant import QATDense, QuantizedLowRankDense, quantize_layer
from .zoo import StudentModel

log = logging.getLogger(__name__)

TEACHER_DIM = 12288


@dataclass(frozen=True)
class DistillExample:
    spectrogram: np.ndarray  # (96, 64)
    target: np.ndarray

    def __post_init__(self):
        spec = self.spectrogram.frames if isinstance(self.spectrogram, LogMelSpectrogram) else self.spectrogram
        object.__setattr__(self, "spectrogram", np.asarray(spec, dtype=np.float32))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float32).ravel())
        if not (np.isfinite(self.spectrogram).all() and np.isfinite(self.target).all()):
            raise ValueError("distillation example contains non-finite values")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr0: float = 1e-4
    decay_factor: float = 0.95
    decay_every_steps: int = 5000
    epochs: int = 50
    seed: int = 0
    teacher_dim: int = TEACHER_DIM
    anneal_epochs: int = 10
    qat_start_epoch: int = 1  # 0-based: epoch 0 is a float warmup
    max_steps: int | None = None
    train_full_kernel: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("batch_size", "lr0", "decay_every_steps", "epochs", "teacher_dim", "anneal_epochs"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.decay_factor < 1:
            raise ConfigError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")


def mse_loss(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    d = pred - target
    return float(np.mean(d * d))


def mse_grad(pred, target):
    return 2.0 * (pred - target) / pred.size


def lr_at(cfg, step):
    """Staircase exponential decay."""
    return cfg.lr0 * cfg.decay_factor ** (step // cfg.decay_every_steps)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """In-place Adam update of every array in ``params`` that has a gradient."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


class DistillHead(L.Dense):
    """Training-only projection from the embedding to the teacher dimension."""


def make_head(embedding_dim, teacher_dim, seed):
    rng = np.random.default_rng([seed, 1])
    kernel = (rng.standard_normal((embedding_dim, teacher_dim)) / math.sqrt(embedding_dim)).astype(np.float32)
    return DistillHead(kernel, np.zeros(teacher_dim, np.float32))


def distill_loss(model, head, x, target, train=False):
    emb = model.forward_batch(x, train)
    pred = head.forward(emb, train)
    return mse_loss(pred, target), pred


def loss_and_grads(model, head, x, target):
    """Loss and gradients of every trainable tensor (head entries prefixed ``head.``)."""
    loss, pred = distill_loss(model, head, x, target, train=True)
    g = mse_grad(pred, target)
    model.backward(head.backward(g))
    grads = dict(model.grads())
    grads.update({f"head.{k}": v for k, v in head.grads.items()})
    return loss, grads


def _all_params(model, head):
    params = dict(model.params())
    params.update({f"head.{k}": v for k, v in head.params.items()})
    return params


@dataclass
class TrainResult:
    model: StudentModel
    loss_history: list
    steps: int


def _set_schedules(model, cfg, step, epoch, schedule):
    bott = model.bottleneck
    if isinstance(bott, LowRankDense) and not bott.finalized:
        bott.lam = lambda_at(schedule, step)
    if model.config.qat and hasattr(bott, "qat"):
        bott.qat = epoch >= cfg.qat_start_epoch


def export(model):
    """Finalize the bottleneck for inference; the head is simply not carried over."""
    bott = model.bottleneck
    if isinstance(bott, LowRankDense):
        bott = finalize(bott)
        if model.config.qat:
            bott = QuantizedLowRankDense.from_factors(bott.U, bott.V, bott.b)
    elif isinstance(bott, QATDense):
        bott = quantize_layer(bott.params["kernel"], bott.params["bias"])
    return StudentModel(model.config, model.topology, model.trunk, bott, model.input_shape)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model, data, cfg, head=None, callback=None):
    """Distill ``data`` into ``model`` (built with ``for_training=True``).

    Batches keep the partial tail of each epoch. Returns the exported model
    (bottleneck finalized, head dropped) and the per-step loss history.
    """
    if not data:
        raise ValueError("training data is empty")
    x = np.stack([ex.spectrogram for ex in data])
    y = np.stack([ex.target for ex in data])
    if y.shape[1] != cfg.teacher_dim:
        raise ShapeError(f"targets have dimension {y.shape[1]}, config expects {cfg.teacher_dim}")
    if isinstance(model.bottleneck, LowRankDense):
        model.bottleneck.train_full_kernel = cfg.train_full_kernel
    head = head or make_head(model.config.embedding_dim, cfg.teacher_dim, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = -(-len(data) // cfg.batch_size)
    schedule = CompressionSchedule(steps_per_epoch, cfg.anneal_epochs)
    state = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    params = _all_params(model, head)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(data), cfg.batch_size, rng):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            _set_schedules(model, cfg, step, epoch, schedule)
            loss, grads = loss_and_grads(model, head, x[idx], y[idx])
            if not math.isfinite(loss):
                raise DivergenceError(step, loss)
            history.append(loss)
            adam_step(params, grads, state, lr_at(cfg, step))
            step += 1
            if callback is not None:
                callback(step, loss)
        else:
            continue
        break
    log.info("trained %d steps, final loss %.6g", step, history[-1] if history else float("nan"))
    return TrainResult(export(model), history, step)


class LinearTeacher:
    """Seeded random linear map of the flattened spectrogram (toy teacher)."""

    def __init__(self, teacher_dim, input_shape=(96, 64), seed=0):
        rng = np.random.default_rng(seed)
        d = int(np.prod(input_shape))
        self.weights = (rng.standard_normal((d, teacher_dim)) / math.sqrt(d)).astype(np.float32)

    def __call__(self, spectrogram):
        frames = spectrogram.frames if isinstance(spectrogram, LogMelSpectrogram) else spectrogram
        return np.asarray(frames, dtype=np.float32).ravel() @ self.weights


class PrecomputedTeacher:
    """Looks targets up by example index, as stored in a distillation file."""

    def __init__(self, targets):
        self.targets = np.asarray(targets, dtype=np.float32)

    def __call__(self, index):
        return self.targets[index]


def make_dataset(spectrograms, teacher):
    return [DistillExample(s, teacher(s)) for s in spectrograms]


_HEADER = struct.Struct("<4sIIII")
_MAGIC = b"FRLD"


def write_dataset(path, examples):
    """Binary record-per-example file: header (magic, count, H, W, teacher_dim), then f32 LE."""
    if not examples:
        raise ValueError("no examples to write")
    h, w = examples[0].spectrogram.shape
    d = examples[0].target.shape[0]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, len(examples), h, w, d))
        for ex in examples:
            f.write(ex.spectrogram.astype("<f4").tobytes())
            f.write(ex.target.astype("<f4").tobytes())


def read_dataset(path):
    path = Path(path)
    if path.is_dir():
        return _read_csv_pairs(path)
    raw = path.read_bytes()
    magic, count, h, w, d = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a distillation dataset (magic {magic!r})")
    rec = h * w + d
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if body.size != count * rec:
        raise ValueError(f"{path}: expected {count} records of {rec} floats, found {body.size} floats")
    body = body.reshape(count, rec).astype(np.float32)
    return [DistillExample(r[:h * w].reshape(h, w), r[h * w:]) for r in body]


def _read_csv_pairs(directory):
    """``<name>.spec.csv`` (one frame per row) paired with ``<name>.target.csv`` (one row)."""
    out = []
    for spec_path in sorted(directory.glob("*.spec.csv")):
        target_path = spec_path.with_name(spec_path.name.replace(".spec.csv", ".target.csv"))
        spec = np.loadtxt(spec_path, delimiter=",", ndmin=2, dtype=np.float32)
        with open(target_path) as f:
            target = [float(v) for row in csv.reader(f) for v in row if v.strip()]
        out.append(DistillExample(spec, np.array(target, np.float32)))
    if not out:
        raise ValueError(f"{directory}: no *.spec.csv files")
    return out
