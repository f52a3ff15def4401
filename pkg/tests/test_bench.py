import struct
import zlib

import numpy as np
import pytest

from speechembed import bench, distill, zoo
from speechembed.errors import BadMagicError, ChecksumError, ClockError, ModelFileError, UnsupportedVersionError
from speechembed.layers import Dense
from speechembed.lowrank import LowRankDense, finalize


def small(name, emb=64, rank=100):
    return zoo.build(zoo.ModelConfig.parse(name, embedding_dim=emb, rank=min(rank, emb)), seed=0)


@pytest.mark.parametrize("name", ["tiny_0.5", "tiny_0.5_gap_qat", "small_0.75_comp_gap", "tiny_1.0_comp_qat"])
def test_round_trip_bit_exact(name, rng):
    model = small(name, emb=32)
    back = bench.deserialize(bench.serialize(model))
    assert type(back.bottleneck) is type(model.bottleneck)
    for _ in range(10):
        x = rng.standard_normal((96, 64)).astype(np.float32)
        assert zoo.forward(back, x).tobytes() == zoo.forward(model, x).tobytes()


def test_round_trip_training_state_models():
    # a mid-training low-rank layer (W kept, lambda > 0) and a float QAT layer also round-trip
    for name in ("tiny_0.5_comp", "tiny_0.5_qat"):
        model = zoo.build(zoo.ModelConfig.parse(name, embedding_dim=16, rank=4), 0, for_training=True)
        if isinstance(model.bottleneck, LowRankDense):
            model.bottleneck.lam = 0.25
        back = bench.deserialize(bench.serialize(model))
        x = np.ones((96, 64), np.float32)
        assert zoo.forward(back, x).tobytes() == zoo.forward(model, x).tobytes()


def test_save_load_and_size(tmp_path):
    model = small("tiny_0.5_gap")
    path = tmp_path / "m.frl"
    n = bench.save(model, path)
    assert bench.model_size(path) == n
    assert bench.load(path).config == model.config


def test_layout_header_and_crc():
    data = bench.serialize(small("tiny_0.5_gap", emb=8))
    assert data[:4] == b"FRL1"
    assert struct.unpack_from("<H", data, 4)[0] == 1
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_truncated_file_is_checksum_error():
    data = bench.serialize(small("tiny_0.5_gap", emb=8))
    for cut in (5, 100, len(data) // 2, len(data) - 1):
        with pytest.raises(ChecksumError):
            bench.deserialize(data[:cut])


def test_flipped_byte_is_checksum_error():
    data = bytearray(bench.serialize(small("tiny_0.5_gap", emb=8)))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(ChecksumError):
        bench.deserialize(bytes(data))


def test_bad_magic_and_version():
    data = bench.serialize(small("tiny_0.5_gap", emb=8))
    with pytest.raises(BadMagicError):
        bench.deserialize(b"XXXX" + data[4:])
    body = data[:4] + struct.pack("<H", 9) + data[6:-4]
    with pytest.raises(UnsupportedVersionError):
        bench.deserialize(body + struct.pack("<I", zlib.crc32(body)))
    assert issubclass(BadMagicError, ModelFileError) and issubclass(ChecksumError, ModelFileError)


def test_quantized_payload_is_int8():
    model = small("tiny_0.5_gap_qat", emb=16)
    plain = small("tiny_0.5_gap", emb=16)
    m, n = model.bottleneck.shape
    assert model.bottleneck.tensors()["kernel"].dtype == np.int8
    diff = (len(bench.layer_records("bottleneck", plain.bottleneck))
            - len(bench.layer_records("bottleneck", model.bottleneck)))
    # three bytes saved per kernel weight, minus the stored scale
    assert diff == 3 * m * n - 4


def test_size_monotone_across_treatments():
    for size in ("tiny", "small"):
        for gap in ("", "_gap"):
            base = f"{size}_0.5{gap}"
            f = len(bench.serialize(small(base, emb=2048)))
            q = len(bench.serialize(small(base + "_qat", emb=2048)))
            c = len(bench.serialize(small(base.replace(gap, "") + "_comp" + gap, emb=2048)))
            assert q <= f and c <= f


def test_compressed_bottleneck_byte_ratio(rng):
    m = n = 2048
    W = rng.standard_normal((m, n)).astype(np.float32)
    b = np.zeros(n, np.float32)
    dense = len(bench.layer_records("bottleneck", Dense(W, b)))
    comp = finalize(LowRankDense(np.zeros((m, 100), np.float32), np.zeros((n, 100), np.float32), b, W=W))
    packed = len(bench.layer_records("bottleneck", comp))
    assert dense / packed >= 9.0
    assert dense / packed == pytest.approx(m * n / (100 * (m + n)), rel=0.01)


def test_latency_report_contract():
    model = small("tiny_0.5_comp_gap", emb=128)
    rep = bench.measure_latency(model, runs=30, warmup=3)
    assert rep.timed_runs == 30 == len(rep.per_run_ms) and rep.warmup_runs == 3
    assert rep.p10_ms <= rep.median_ms <= rep.p90_ms
    assert all(t > 0 for t in rep.per_run_ms)


def test_noop_faster_than_model():
    noop = bench.measure_latency(lambda x: x, runs=30)
    real = bench.measure_latency(small("tiny_0.5_gap", emb=64), runs=30)
    assert 0 <= noop.median_ms < real.median_ms


def test_warmups_excluded_from_report():
    calls = []
    bench.measure_latency(lambda x: calls.append(1), warmup=7, runs=31)
    assert len(calls) == 38


def test_too_few_runs():
    with pytest.raises(ValueError):
        bench.measure_latency(lambda x: x, runs=29)


def test_clock_going_backwards():
    ticks = iter([100, 50])
    with pytest.raises(ClockError):
        bench.measure_latency(lambda x: x, warmup=0, runs=30, clock=lambda: next(ticks))


def test_exported_distilled_model_serializes():
    model = zoo.build(zoo.ModelConfig("tiny", 1.0, compressed=True, qat=True, embedding_dim=8, rank=4),
                      0, topology=zoo.toy_topology(), for_training=True)
    rng = np.random.default_rng(0)
    data = distill.make_dataset(list(rng.standard_normal((4, 96, 64)).astype(np.float32)),
                                distill.LinearTeacher(10, seed=1))
    res = distill.train(model, data, distill.TrainConfig(batch_size=2, epochs=2, teacher_dim=10, lr0=1e-3))
    back = bench.deserialize(bench.serialize(res.model))
    x = data[0].spectrogram
    assert zoo.forward(back, x).tobytes() == zoo.forward(res.model, x).tobytes()
