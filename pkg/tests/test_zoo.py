import numpy as np
import pytest

from speechembed import kernels as K
from speechembed import zoo
from speechembed.errors import ConfigError, ShapeError
from speechembed.lowrank import LowRankDense
from speechembed.quant import QuantizedDense


def test_grid_has_144_distinct_configs():
    grid = zoo.enumerate_grid()
    assert len(grid) == 144
    assert len({c.name for c in grid}) == 144
    assert len(set(grid)) == 144


def test_tiny_topology_facts():
    m = zoo.build(zoo.ModelConfig("tiny", 1.0, gap=True, embedding_dim=64), seed=0)
    assert zoo.inverted_residual_count(m) == 9
    assert zoo.final_conv_channels(m) == 512
    small = zoo.build(zoo.ModelConfig("small", 1.0, gap=True, embedding_dim=64), seed=0)
    assert zoo.inverted_residual_count(small) == 11
    assert zoo.final_conv_channels(small) == 1024


def test_removed_blocks_duplicate_their_predecessors():
    for i in zoo.TINY_REMOVED:
        assert zoo.SMALL_BLOCKS[i - 1] == zoo.SMALL_BLOCKS[i - 2]


def test_build_is_deterministic():
    c = zoo.ModelConfig("small", 0.75, gap=True, embedding_dim=64)
    a, b = zoo.build(c, seed=7).tensors(), zoo.build(c, seed=7).tensors()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    other = zoo.build(c, seed=8).tensors()
    assert any(a[k].tobytes() != other[k].tobytes() for k in a)


def test_unknown_size():
    with pytest.raises(ConfigError):
        zoo.ModelConfig("medium", 1.0)
    with pytest.raises(ConfigError):
        zoo.ModelConfig("small", 0.6)


@pytest.mark.parametrize("channels,alpha,expected", [
    (16, 1.0, 16),
    (16, 0.5, 8),
    (24, 0.75, 24),  # 18 rounds to 16, which is under 90% of 18, so it bumps to 24
    (1024, 2.0, 2048),
    (576, 0.5, 288),
    (3, 0.5, 8),
])
def test_width_scale(channels, alpha, expected):
    assert zoo.width_scale(channels, alpha) == expected


def test_width_scale_rule_holds_everywhere():
    for c in range(1, 1300):
        for a in zoo.WIDTHS:
            v = zoo.width_scale(c, a)
            assert v % 8 == 0 and v >= 8 and v >= 0.9 * c * a


def test_gap_changes_bottleneck_input_by_spatial_factor():
    flat = zoo.plan(zoo.ModelConfig("small", 1.0, gap=False))
    pooled = zoo.plan(zoo.ModelConfig("small", 1.0, gap=True))
    h, w, c = flat.feature_shape
    assert (h, w) == (3, 2)
    assert pooled.bottleneck_in == c
    assert flat.bottleneck_in == h * w * pooled.bottleneck_in


def test_forward_shape_and_errors(rng):
    m = zoo.build(zoo.ModelConfig("tiny", 0.5, gap=True, embedding_dim=32), seed=1)
    y = zoo.forward(m, rng.standard_normal((96, 64)))
    assert y.shape == (32,) and np.isfinite(y).all()
    with pytest.raises(ShapeError):
        zoo.forward(m, np.zeros((95, 64)))


def test_zero_input_is_deterministic_and_finite():
    m = zoo.build(zoo.ModelConfig("small", 0.5, embedding_dim=32), seed=3)
    a = zoo.forward(m, np.zeros((96, 64)))
    b = zoo.forward(m, np.zeros((96, 64)))
    assert np.isfinite(a).all() and a.tobytes() == b.tobytes()


def _conv_ref(layer, x):
    p, b = layer.params, layer.buffers
    if layer.depthwise:
        z = K.depthwise_conv2d(x, p["kernel"], layer.stride, "same")
    else:
        z = K.conv2d(x, p["kernel"], layer.stride, "same")
    if "bias" in p:
        z = z + p["bias"]
    if "bn_mean" in b:
        z = K.batchnorm_fold(z, b["bn_mean"], b["bn_var"], b["bn_gamma"], b["bn_beta"], 1e-3)
    return K.ACTIVATIONS[layer.act][0](z)


def test_forward_is_kernel_composition_on_toy(rng):
    topo = zoo.toy_topology()
    for gap in (False, True):
        m = zoo.build(zoo.ModelConfig("tiny", 1.0, gap=gap, embedding_dim=24), seed=5, topology=topo)
        m.astype(np.float64)
        spec = rng.standard_normal((96, 64))
        h = spec[None, :, :, None]
        for name, layer in m.trunk:
            if name.startswith("block"):
                sub = layer.sublayers
                y = h
                if sub["expand"] is not None:
                    y = _conv_ref(sub["expand"], y)
                y = _conv_ref(sub["dw"], y)
                if sub["se"] is not None:
                    p = sub["se"].params
                    s = K.global_avg_pool(y)
                    a = K.hard_sigmoid(K.dense(K.relu(K.dense(s, p["w1"], p["b1"])), p["w2"], p["b2"]))
                    y = y * a[:, None, None, :]
                y = _conv_ref(sub["project"], y)
                h = y + h if layer.residual else y
            else:
                h = _conv_ref(layer, h)
        feat = K.global_avg_pool(h) if gap else K.flatten_concat(h)
        bp = m.bottleneck.params
        ref = K.dense(feat, bp["kernel"], bp["bias"])[0]
        np.testing.assert_allclose(zoo.forward(m, spec), ref, rtol=1e-12, atol=1e-12)


def test_param_count_dense_and_compressed():
    c = zoo.ModelConfig("tiny", 0.5, gap=True)
    p = zoo.plan(c)
    m, n = p.bottleneck_in, p.bottleneck_out
    model = zoo.build(c, 0)
    assert model.bottleneck.param_count() == m * n + n
    comp = zoo.build(zoo.ModelConfig("tiny", 0.5, gap=True, compressed=True), 0)
    assert isinstance(comp.bottleneck, LowRankDense) and comp.bottleneck.finalized
    assert comp.bottleneck.param_count() == 100 * (m + n) + n
    assert zoo.param_count(comp) == zoo.count_params(comp.config)


def test_qat_inference_bottleneck_is_int8():
    m = zoo.build(zoo.ModelConfig("tiny", 0.5, gap=True, qat=True, embedding_dim=64), 0)
    assert isinstance(m.bottleneck, QuantizedDense)
    assert m.bottleneck.q_kernel.dtype == np.int8


def test_sizes_strictly_ordered():
    for w in zoo.WIDTHS:
        for gap in (False, True):
            t, s, l = (zoo.count_params(zoo.ModelConfig(z, w, gap=gap)) for z in zoo.SIZES)
            assert t < s < l


def test_param_count_monotone_in_width():
    for size in zoo.SIZES:
        for gap in (False, True):
            counts = [zoo.count_params(zoo.ModelConfig(size, w, gap=gap)) for w in zoo.WIDTHS]
            assert counts == sorted(counts)


def test_gap_law():
    for c in zoo.enumerate_grid():
        if c.compressed:
            continue
        flat = zoo.count_params(zoo.ModelConfig(c.mv3_size, c.width, gap=False, qat=c.qat))
        pooled = zoo.count_params(zoo.ModelConfig(c.mv3_size, c.width, gap=True, qat=c.qat))
        h, w, ch = zoo.plan(c).feature_shape
        assert flat - pooled == (h * w - 1) * ch * 2048


def test_plan_count_matches_built_model():
    for name in ("tiny_0.5", "small_1.25_gap_qat", "large_0.75_comp"):
        c = zoo.ModelConfig.parse(name, embedding_dim=128)
        assert zoo.param_count(zoo.build(c, 0)) == zoo.count_params(c)


@pytest.mark.slow
def test_all_144_configs_forward(rng):
    spec = rng.standard_normal((96, 64)).astype(np.float32)
    for c in zoo.enumerate_grid(embedding_dim=128):
        y = zoo.forward(zoo.build(c, 0), spec)
        assert y.shape == (128,) and np.isfinite(y).all(), c.name


@pytest.mark.parametrize("text,expected", [
    ("small_2.0_gap_qat", ("small", 2.0, True, False, True)),
    ("Small_2.0_GAP", ("small", 2.0, True, False, False)),
    ("Tiny_0.5_Comp_GAP", ("tiny", 0.5, True, True, False)),
    ("large_1.25", ("large", 1.25, False, False, False)),
])
def test_config_names(text, expected):
    c = zoo.ModelConfig.parse(text)
    assert (c.mv3_size, c.width, c.gap, c.compressed, c.qat) == expected
    assert zoo.ModelConfig.parse(c.name) == c


def test_bad_names():
    for bad in ("small", "small_x", "small_1.0_fast", "small_1.0_gap_gap"):
        with pytest.raises(ConfigError):
            zoo.ModelConfig.parse(bad)
