"""MobileNetV3-family student networks with a dense bottleneck.

A network is described by a :class:`Topology` (stem, inverted residual
blocks, last 1x1 conv, final 1x1 conv) plus a :class:`ModelConfig` choosing
size, width multiplier, pooling and bottleneck treatment. ``plan`` turns the
pair into shapes only, so parameter counts never need allocated weights.
"""

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError
from .frontend import CONTEXT_FRAMES, NUM_MEL_BINS, LogMelSpectrogram
from .lowrank import DEFAULT_RANK, LowRankDense, finalize, truncated_svd
from .quant import QATDense, QuantizedDense, QuantizedLowRankDense, quantize_layer

SIZES = ("tiny", "small", "large")
WIDTHS = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0)
INPUT_SHAPE = (CONTEXT_FRAMES, NUM_MEL_BINS)


@dataclass(frozen=True)
class BlockSpec:
    kernel: int
    expand: int
    out: int
    se: bool
    act: str
    stride: int


def _b(k, exp, out, se, act, s):
    return BlockSpec(k, exp, out, se, act, s)


# Reference MobileNetV3 block tables (small and large).
SMALL_BLOCKS = (
    _b(3, 16, 16, True, "relu", 2),
    _b(3, 72, 24, False, "relu", 2),
    _b(3, 88, 24, False, "relu", 1),
    _b(5, 96, 40, True, "hswish", 2),
    _b(5, 240, 40, True, "hswish", 1),
    _b(5, 240, 40, True, "hswish", 1),
    _b(5, 120, 48, True, "hswish", 1),
    _b(5, 144, 48, True, "hswish", 1),
    _b(5, 288, 96, True, "hswish", 2),
    _b(5, 576, 96, True, "hswish", 1),
    _b(5, 576, 96, True, "hswish", 1),
)

LARGE_BLOCKS = (
    _b(3, 16, 16, False, "relu", 1),
    _b(3, 64, 24, False, "relu", 2),
    _b(3, 72, 24, False, "relu", 1),
    _b(5, 72, 40, True, "relu", 2),
    _b(5, 120, 40, True, "relu", 1),
    _b(5, 120, 40, True, "relu", 1),
    _b(3, 240, 80, False, "hswish", 2),
    _b(3, 200, 80, False, "hswish", 1),
    _b(3, 184, 80, False, "hswish", 1),
    _b(3, 184, 80, False, "hswish", 1),
    _b(3, 480, 112, True, "hswish", 1),
    _b(3, 672, 112, True, "hswish", 1),
    _b(5, 672, 160, True, "hswish", 2),
    _b(5, 960, 160, True, "hswish", 1),
    _b(5, 960, 160, True, "hswish", 1),
)

# 1-indexed positions in SMALL_BLOCKS that the tiny variant drops.
TINY_REMOVED = (6, 11)


@dataclass(frozen=True)
class Topology:
    stem: int
    blocks: tuple
    last_conv: int | None
    final_conv: int
    stem_act: str = "hswish"
    last_act: str = "hswish"

    def to_dict(self):
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)


def _tiny_blocks():
    for i in TINY_REMOVED:
        if SMALL_BLOCKS[i - 1] != SMALL_BLOCKS[i - 2]:
            raise AssertionError(f"block {i} is not a duplicate of block {i - 1}")
    return tuple(b for i, b in enumerate(SMALL_BLOCKS, 1) if i not in TINY_REMOVED)


REFERENCE_TOPOLOGIES = {
    "small": Topology(stem=16, blocks=SMALL_BLOCKS, last_conv=576, final_conv=1024),
    "tiny": Topology(stem=16, blocks=_tiny_blocks(), last_conv=576, final_conv=512),
    "large": Topology(stem=16, blocks=LARGE_BLOCKS, last_conv=960, final_conv=1280),
}


@dataclass(frozen=True)
class ModelConfig:
    mv3_size: str
    width: float
    gap: bool = False
    compressed: bool = False
    qat: bool = False
    embedding_dim: int = 2048
    rank: int = DEFAULT_RANK

    def __post_init__(self):
        if self.mv3_size not in SIZES:
            raise ConfigError(f"unknown MobileNetV3 size {self.mv3_size!r}; expected one of {SIZES}")
        if float(self.width) not in WIDTHS:
            raise ConfigError(f"width {self.width} not in {WIDTHS}")
        object.__setattr__(self, "width", float(self.width))
        if self.embedding_dim <= 0:
            raise ConfigError("embedding_dim must be positive")
        if self.rank <= 0:
            raise ConfigError("rank must be positive")

    @property
    def name(self):
        parts = [self.mv3_size, repr(self.width)]
        parts += [flag for flag, on in (("comp", self.compressed), ("gap", self.gap),
                                        ("qat", self.qat)) if on]
        return "_".join(parts)

    @classmethod
    def parse(cls, name, **kw):
        """Parse ``small_2.0_gap_qat`` style names; case and flag order are free."""
        tokens = name.strip().lower().split("_")
        if len(tokens) < 2:
            raise ConfigError(f"cannot parse config name {name!r}")
        try:
            width = float(tokens[1])
        except ValueError:
            raise ConfigError(f"bad width in config name {name!r}") from None
        flags = set(tokens[2:])
        unknown = flags - {"comp", "gap", "qat"}
        if unknown or len(flags) != len(tokens[2:]):
            raise ConfigError(f"unknown or repeated flags {sorted(unknown) or tokens[2:]} in {name!r}")
        return cls(tokens[0], width, gap="gap" in flags, compressed="comp" in flags,
                   qat="qat" in flags, **kw)

    def to_dict(self):
        return asdict(self)


def enumerate_grid(**kw):
    """All 3 x 6 x 2 x 2 x 2 = 144 configurations, in a fixed order."""
    return [ModelConfig(size, width, gap=gap, compressed=comp, qat=qat, **kw)
            for size, width, gap, comp, qat in itertools.product(
                SIZES, WIDTHS, (False, True), (False, True), (False, True))]


def width_scale(channels, alpha, divisor=8):
    """Scale ``channels`` by ``alpha`` and round to a multiple of ``divisor``.

    Rounds to the nearest multiple (halves go up), never below ``divisor``,
    and bumps up one step if rounding lost more than 10%.
    """
    v = channels * alpha
    new = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new < 0.9 * v:
        new += divisor
    return new


@dataclass(frozen=True)
class _ConvPlan:
    name: str
    kh: int
    cin: int
    cout: int
    stride: int
    act: str | None
    bn: bool = True
    bias: bool = False
    depthwise: bool = False

    def count(self):
        k = self.kh * self.kh * self.cin * (1 if self.depthwise else self.cout)
        return k + (4 * self.cout if self.bn else 0) + (self.cout if self.bias else 0)


@dataclass(frozen=True)
class _SEPlan:
    name: str
    channels: int
    reduced: int

    def count(self):
        c, r = self.channels, self.reduced
        return c * r + r + r * c + c


@dataclass(frozen=True)
class _BlockPlan:
    name: str
    expand: _ConvPlan | None
    dw: _ConvPlan
    se: _SEPlan | None
    project: _ConvPlan
    residual: bool

    def count(self):
        return sum(p.count() for p in (self.expand, self.dw, self.se, self.project) if p)


@dataclass(frozen=True)
class ModelPlan:
    config: ModelConfig
    topology: Topology
    trunk: tuple
    feature_shape: tuple  # (H, W, C) of the final feature map
    bottleneck_in: int

    @property
    def bottleneck_out(self):
        return self.config.embedding_dim

    def trunk_count(self):
        return sum(p.count() for p in self.trunk)

    def bottleneck_count(self, inference=True):
        m, n = self.bottleneck_in, self.bottleneck_out
        if self.config.compressed:
            k = self.config.rank
            return k * (m + n) + n + (0 if inference else m * n)
        return m * n + n

    def count(self, inference=True):
        return self.trunk_count() + self.bottleneck_count(inference)


def _spatial(size, stride):
    return -(-size // stride)


def plan(config, topology=None, input_shape=INPUT_SHAPE):
    """Shape-only description of the network for ``config``."""
    topo = topology or REFERENCE_TOPOLOGIES[config.mv3_size]
    a = config.width
    h, w = input_shape
    trunk = []
    c = width_scale(topo.stem, a)
    trunk.append(_ConvPlan("stem", 3, 1, c, 2, topo.stem_act))
    h, w = _spatial(h, 2), _spatial(w, 2)
    for i, blk in enumerate(topo.blocks, 1):
        exp = width_scale(blk.expand, a)
        out = width_scale(blk.out, a)
        name = f"block{i}"
        expand = None if exp == c else _ConvPlan(f"{name}.expand", 1, c, exp, 1, blk.act)
        dw = _ConvPlan(f"{name}.dw", blk.kernel, exp, exp, blk.stride, blk.act, depthwise=True)
        se = _SEPlan(f"{name}.se", exp, width_scale(exp, 0.25)) if blk.se else None
        proj = _ConvPlan(f"{name}.project", 1, exp, out, 1, None)
        trunk.append(_BlockPlan(name, expand, dw, se, proj, blk.stride == 1 and c == out))
        h, w = _spatial(h, blk.stride), _spatial(w, blk.stride)
        c = out
    if topo.last_conv:
        last = width_scale(topo.last_conv, a)
        trunk.append(_ConvPlan("last_conv", 1, c, last, 1, topo.last_act))
        c = last
    final = width_scale(topo.final_conv, a)
    trunk.append(_ConvPlan("final_conv", 1, c, final, 1, topo.last_act, bn=False, bias=True))
    feature = (h, w, final)
    m = final if config.gap else h * w * final
    return ModelPlan(config, topo, tuple(trunk), feature, m)


def count_params(config, topology=None, inference=True):
    return plan(config, topology).count(inference)


def _trunc_normal(rng, shape, std, dtype=np.float32):
    x = rng.standard_normal(size=shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(x) > 2
    return (x * std).astype(dtype)


def _make_conv(p, rng):
    if p.depthwise:
        kernel = _trunc_normal(rng, (p.kh, p.kh, p.cin), math.sqrt(2.0 / (p.kh * p.kh)))
    else:
        kernel = _trunc_normal(rng, (p.kh, p.kh, p.cin, p.cout), math.sqrt(2.0 / (p.kh * p.kh * p.cin)))
    bn = None
    if p.bn:
        bn = {
            "bn_mean": (rng.standard_normal(p.cout) * 0.01).astype(np.float32),
            "bn_var": rng.uniform(0.9, 1.1, p.cout).astype(np.float32),
            "bn_gamma": np.ones(p.cout, np.float32),
            "bn_beta": np.zeros(p.cout, np.float32),
        }
    bias = np.zeros(p.cout, np.float32) if p.bias else None
    return L.Conv(kernel, p.stride, p.act, bn=bn, bias=bias, depthwise=p.depthwise)


def _make_se(p, rng):
    c, r = p.channels, p.reduced
    return L.SqueezeExcite(
        _trunc_normal(rng, (c, r), math.sqrt(2.0 / c)), np.zeros(r, np.float32),
        _trunc_normal(rng, (r, c), math.sqrt(1.0 / r)), np.zeros(c, np.float32))


def _make_trunk(plan_, rng):
    layers = []
    for p in plan_.trunk:
        if isinstance(p, _ConvPlan):
            layers.append((p.name, _make_conv(p, rng)))
        else:
            expand = _make_conv(p.expand, rng) if p.expand else None
            dw = _make_conv(p.dw, rng)
            se = _make_se(p.se, rng) if p.se else None
            proj = _make_conv(p.project, rng)
            layers.append((p.name, L.InvertedResidual(expand, dw, se, proj, p.residual)))
    return layers


def make_bottleneck(config, W, b, for_training):
    """Wrap an initial kernel in the bottleneck layer ``config`` calls for."""
    if config.compressed:
        layer = LowRankDense.from_kernel(W, b, k=config.rank)
        if for_training:
            layer.qat = False
            return layer
        if config.qat:
            return QuantizedLowRankDense.from_factors(layer.U, layer.V, b)
        return finalize(layer)
    if config.qat:
        return QATDense(W, b) if for_training else quantize_layer(W, b)
    return L.Dense(W, b)


class StudentModel:
    """Trunk, pooling and bottleneck; maps a 96x64 log-Mel block to an embedding."""

    def __init__(self, config, topology, trunk, bottleneck, input_shape=INPUT_SHAPE):
        self.config = config
        self.topology = topology
        self.trunk = list(trunk)  # [(name, layer)]
        self.pool = L.GlobalAvgPool() if config.gap else L.Flatten()
        self.bottleneck = bottleneck
        self.input_shape = tuple(input_shape)

    @property
    def plan(self):
        return plan(self.config, self.topology, self.input_shape)

    def named_layers(self):
        yield from self.trunk
        yield "bottleneck", self.bottleneck

    def tensors(self):
        out = {}
        for name, layer in self.named_layers():
            for k, v in layer.tensors().items():
                out[f"{name}.{k}"] = v
        return out

    def params(self):
        out = {}
        for name, layer in self.named_layers():
            for k, v in layer.params.items():
                out[f"{name}.{k}"] = v
        return out

    def grads(self):
        out = {}
        for name, layer in self.named_layers():
            for k, v in layer.grads.items():
                out[f"{name}.{k}"] = v
        return out

    def astype(self, dtype):
        for _, layer in self.named_layers():
            layer.astype(dtype)
        return self

    def features(self, x, train=False):
        for _, layer in self.trunk:
            x = layer.forward(x, train)
        return x

    def forward_batch(self, x, train=False):
        """``x``: (N, 96, 64) or (N, 96, 64, 1) -> (N, embedding_dim)."""
        if x.ndim == 3:
            x = x[..., None]
        if x.shape[1:] != self.input_shape + (1,):
            raise ShapeError(f"expected input (N, {self.input_shape[0]}, {self.input_shape[1]}), got {x.shape}")
        h = self.pool.forward(self.features(x, train), train)
        return self.bottleneck.forward(h, train)

    def backward(self, grad):
        g = self.bottleneck.backward(grad)
        g = self.pool.backward(g)
        for _, layer in reversed(self.trunk):
            g = layer.backward(g)
        return g

    def __call__(self, spec):
        return forward(self, spec)


def build(config, seed=0, topology=None, for_training=False, input_shape=INPUT_SHAPE):
    """Instantiate ``config`` with seeded weights.

    ``for_training=False`` gives the inference form: compressed bottlenecks are
    factored and finalized, QAT bottlenecks are int8. ``for_training=True``
    keeps the full kernel (lambda = 1) and a fake-quant capable layer.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError(f"expected ModelConfig, got {type(config).__name__}")
    p = plan(config, topology, input_shape)
    rng = np.random.default_rng(seed)
    trunk = _make_trunk(p, rng)
    m, n = p.bottleneck_in, p.bottleneck_out
    W = _trunc_normal(rng, (m, n), math.sqrt(1.0 / m))
    b = np.zeros(n, np.float32)
    return StudentModel(config, p.topology, trunk, make_bottleneck(config, W, b, for_training),
                        input_shape)


def build_trunk(config, topology=None, input_shape=INPUT_SHAPE, seed=0):
    """Trunk layers only; used when weights come from elsewhere (e.g. a model file)."""
    p = plan(config, topology, input_shape)
    return p, _make_trunk(p, np.random.default_rng(seed))


def forward(model, spec):
    frames = spec.frames if isinstance(spec, LogMelSpectrogram) else np.asarray(spec)
    if frames.shape != model.input_shape:
        raise ShapeError(f"expected a {model.input_shape} spectrogram, got {frames.shape}")
    dtype = next(iter(model.params().values())).dtype
    return model.forward_batch(frames.astype(dtype)[None])[0]


def param_count(model):
    return sum(layer.param_count() for _, layer in model.named_layers())


def toy_topology(blocks=2, channels=8, final_conv=16):
    """Small trunk used for end-to-end training checks."""
    specs = [
        BlockSpec(3, 2 * channels, channels, False, "relu", 2),
        BlockSpec(3, 2 * channels, channels, True, "hswish", 1),
    ]
    specs = tuple(specs[i % 2] for i in range(blocks))
    return Topology(stem=channels, blocks=specs, last_conv=None, final_conv=final_conv)


def inverted_residual_count(model):
    return sum(isinstance(layer, L.InvertedResidual) for _, layer in model.trunk)


def final_conv_channels(model):
    return dict(model.trunk)["final_conv"].out_channels
