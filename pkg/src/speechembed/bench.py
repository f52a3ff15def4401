"""Model file format and the single-threaded latency protocol.

File layout (all integers little-endian)::

    b"FRL1"  u16 version
    u32 descriptor length, descriptor (UTF-8 JSON: config, topology, bottleneck kind)
    u32 record count, then per record:
        u16 name length, name, u8 dtype (0 = f32, 1 = i8), u8 ndim, u32 dims...,
        [f32 scale, i8 records only], u64 payload length, payload
    u32 CRC-32 of every preceding byte
"""

import json
import statistics
import struct
import time
import zlib
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import layers as L
from .errors import BadMagicError, ChecksumError, ClockError, ModelFileError, UnsupportedVersionError
from .lowrank import LowRankDense
from .quant import QATDense, QuantizedDense, QuantizedLowRankDense, QuantSpec
from .zoo import INPUT_SHAPE, ModelConfig, StudentModel, Topology, build_trunk

MAGIC = b"FRL1"
VERSION = 1
F32, I8 = 0, 1
DEFAULT_WARMUP = 10
MIN_RUNS = 30


def _bottleneck_kind(layer):
    if isinstance(layer, QuantizedLowRankDense):
        return "lowrank_int8"
    if isinstance(layer, QuantizedDense):
        return "dense_int8"
    if isinstance(layer, LowRankDense):
        return "lowrank_final" if layer.finalized else "lowrank_train"
    if isinstance(layer, QATDense):
        return "dense_qat"
    return "dense"


def _pack_record(name, arr, scale=None):
    arr = np.asarray(arr)
    name_b = name.encode("utf-8")
    if arr.dtype == np.int8:
        code, payload = I8, arr.tobytes()
    else:
        code, payload = F32, arr.astype("<f4").tobytes()
    parts = [struct.pack("<H", len(name_b)), name_b, struct.pack("<BB", code, arr.ndim),
             struct.pack(f"<{arr.ndim}I", *arr.shape)]
    if code == I8:
        parts.append(struct.pack("<f", scale))
    parts += [struct.pack("<Q", len(payload)), payload]
    return b"".join(parts)


def layer_records(prefix, layer):
    """Serialized tensor records of one layer (for byte accounting)."""
    scales = layer.scales() if hasattr(layer, "scales") else {}
    return b"".join(_pack_record(f"{prefix}.{k}", v, scales.get(k))
                    for k, v in layer.tensors().items())


def serialize(model):
    bott = model.bottleneck
    desc = {
        "config": model.config.to_dict(),
        "topology": model.topology.to_dict(),
        "input_shape": list(model.input_shape),
        "bottleneck": _bottleneck_kind(bott),
        "lambda": getattr(bott, "lam", None),
    }
    desc_b = json.dumps(desc, sort_keys=True).encode("utf-8")
    records = [layer_records(name, layer) for name, layer in model.named_layers()]
    count = sum(len(layer.tensors()) for _, layer in model.named_layers())
    body = b"".join([MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(desc_b)), desc_b,
                     struct.pack("<I", count), *records])
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.buf):
            raise ModelFileError("unexpected end of model file")
        out = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return out

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise ModelFileError("unexpected end of model file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def _read_records(r):
    (count,) = r.take("<I")
    tensors, scales = {}, {}
    for _ in range(count):
        (nlen,) = r.take("<H")
        name = r.raw(nlen).decode("utf-8")
        code, ndim = r.take("<BB")
        shape = r.take(f"<{ndim}I")
        scale = r.take("<f")[0] if code == I8 else None
        (plen,) = r.take("<Q")
        payload = r.raw(plen)
        if code not in (F32, I8):
            raise ModelFileError(f"record {name!r}: unknown dtype code {code}")
        dtype = np.dtype("<f4") if code == F32 else np.dtype(np.int8)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if scale is not None:
            scales[name] = scale
    return tensors, scales


def deserialize(data):
    data = bytes(data)
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 10:
        raise ChecksumError("model file truncated")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"model file version {version}, this reader supports {VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("model file checksum mismatch (corrupt or truncated)")
    r = _Reader(body)
    r.pos = 6
    (dlen,) = r.take("<I")
    desc = json.loads(r.raw(dlen).decode("utf-8"))
    tensors, scales = _read_records(r)
    return _assemble(desc, tensors, scales)


def _strip(tensors, prefix):
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def _assemble(desc, tensors, scales):
    config = ModelConfig(**desc["config"])
    topology = Topology.from_dict(desc["topology"])
    input_shape = tuple(desc["input_shape"])
    _, trunk = build_trunk(config, topology, input_shape)
    for name, layer in trunk:
        layer.load(_strip(tensors, name))
    bt = _strip(tensors, "bottleneck")
    kind = desc["bottleneck"]
    if kind == "dense":
        bott = L.Dense(bt["kernel"], bt["bias"])
    elif kind == "dense_qat":
        bott = QATDense(bt["kernel"], bt["bias"])
    elif kind == "dense_int8":
        bott = QuantizedDense(bt["kernel"], QuantSpec(scales["bottleneck.kernel"]), bt["bias"])
    elif kind == "lowrank_final":
        bott = LowRankDense(bt["U"], bt["V"], bt["bias"], W=None, lam=0.0)
    elif kind == "lowrank_train":
        bott = LowRankDense(bt["U"], bt["V"], bt["bias"], W=bt["kernel"], lam=desc["lambda"])
    elif kind == "lowrank_int8":
        bott = QuantizedLowRankDense(bt["U"], QuantSpec(scales["bottleneck.U"]),
                                     bt["V"], QuantSpec(scales["bottleneck.V"]), bt["bias"])
    else:
        raise ModelFileError(f"unknown bottleneck kind {kind!r}")
    return StudentModel(config, topology, trunk, bott, input_shape)


def save(model, path):
    data = serialize(model)
    Path(path).write_bytes(data)
    return len(data)


def load(path):
    return deserialize(Path(path).read_bytes())


def model_size(path):
    return Path(path).stat().st_size


@dataclass(frozen=True)
class LatencyReport:
    config_name: str
    warmup_runs: int
    timed_runs: int
    per_run_ms: list
    median_ms: float
    p10_ms: float
    p90_ms: float

    def to_dict(self):
        return asdict(self)


def single_thread():
    """Limit BLAS/OpenMP pools to one thread for the enclosed block."""
    return threadpool_limits(limits=1)


def measure_latency(model, spec=None, warmup=DEFAULT_WARMUP, runs=MIN_RUNS, name=None,
                    clock=time.perf_counter_ns, pin=True):
    """Time ``runs`` single-input forward calls after ``warmup`` untimed ones.

    ``model`` may be a :class:`StudentModel` or any one-argument callable.
    """
    if runs < MIN_RUNS:
        raise ValueError(f"need at least {MIN_RUNS} timed runs, got {runs}")
    if spec is None:
        spec = np.zeros(INPUT_SHAPE, np.float32)
    frames = getattr(spec, "frames", spec)
    if isinstance(model, StudentModel):
        x = np.asarray(frames, np.float32)[None]
        fn = lambda: model.forward_batch(x)  # noqa: E731
        name = name or model.config.name
    else:
        fn = lambda: model(frames)  # noqa: E731
        name = name or getattr(model, "__name__", "callable")
    per_run = []
    with single_thread() if pin else nullcontext():
        for _ in range(warmup):
            fn()
        for _ in range(runs):
            t0 = clock()
            fn()
            t1 = clock()
            if t1 < t0:
                raise ClockError(f"clock went backwards ({t0} -> {t1}); measurement aborted")
            per_run.append((t1 - t0) / 1e6)
    q = np.percentile(per_run, [10, 90])
    return LatencyReport(name, warmup, runs, per_run, statistics.median(per_run), float(q[0]), float(q[1]))
