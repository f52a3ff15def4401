import numpy as np
import pytest

import oracles
from speechembed import distill, zoo
from speechembed.errors import DivergenceError, ShapeError
from speechembed.lowrank import LowRankDense
from speechembed.quant import QuantizedDense, QuantizedLowRankDense


def toy_model(compressed=False, qat=False, emb=8, seed=0):
    c = zoo.ModelConfig("tiny", 1.0, gap=False, compressed=compressed, qat=qat, embedding_dim=emb, rank=4)
    return zoo.build(c, seed=seed, topology=zoo.toy_topology(), for_training=True)


def toy_data(n=6, dim=16, seed=1):
    rng = np.random.default_rng(seed)
    specs = list(rng.standard_normal((n, 96, 64)).astype(np.float32))
    return distill.make_dataset(specs, distill.LinearTeacher(dim, seed=2))


class TestLoss:
    def test_equal_is_zero(self, rng):
        v = rng.standard_normal(10)
        assert distill.mse_loss(v, v) == 0.0

    def test_constant_offset(self, rng):
        v = rng.standard_normal(10)
        assert distill.mse_loss(v + 0.3, v) == pytest.approx(0.09)

    def test_vs_scalar_loop(self, rng):
        a, b = rng.standard_normal(37), rng.standard_normal(37)
        ref = sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / 37
        assert abs(distill.mse_loss(a, b) - ref) <= 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            distill.mse_loss(np.zeros(3), np.zeros(4))


class TestSchedule:
    @pytest.mark.parametrize("step,lr", [(0, 1e-4), (4999, 1e-4), (5000, 9.5e-5), (14999, 9.025e-5)])
    def test_staircase(self, step, lr):
        assert distill.lr_at(distill.TrainConfig(), step) == pytest.approx(lr, rel=1e-12)

    def test_non_increasing(self):
        cfg = distill.TrainConfig(decay_every_steps=3)
        lrs = [distill.lr_at(cfg, s) for s in range(50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestAdam:
    def test_zero_gradient_keeps_params(self, rng):
        p = {"w": rng.standard_normal(5)}
        before = p["w"].copy()
        distill.adam_step(p, {"w": np.zeros(5)}, distill.AdamState(), 1e-3)
        assert p["w"].tobytes() == before.tobytes()

    def test_first_step_is_sign_times_lr(self, rng):
        p = {"w": np.zeros(6)}
        g = rng.standard_normal(6)
        distill.adam_step(p, {"w": g}, distill.AdamState(), 1e-3)
        np.testing.assert_allclose(p["w"], -np.sign(g) * 1e-3, rtol=1e-5)

    def test_quadratic_trajectory_vs_scalar_oracle(self, rng):
        a = rng.uniform(0.5, 3.0, 4)
        c = rng.standard_normal(4)
        theta0 = rng.standard_normal(4)
        grad = lambda th: [2 * a[i] * (th[i] - c[i]) for i in range(4)]  # noqa: E731
        traj = oracles.scalar_adam(list(theta0), grad, 0.05, 10)
        p = {"w": theta0.copy()}
        state = distill.AdamState()
        for t in range(10):
            distill.adam_step(p, {"w": np.array(grad(list(p["w"])))}, state, 0.05)
            np.testing.assert_allclose(p["w"], traj[t + 1], atol=1e-10, rtol=0)


def _grad_check(model, head, x, y, names, rng, samples=20, h=1e-3):
    model.astype(np.float64)
    head.astype(np.float64)
    _, grads = distill.loss_and_grads(model, head, x, y)
    params = dict(model.params())
    params.update({f"head.{k}": v for k, v in head.params.items()})
    f = lambda: distill.distill_loss(model, head, x, y)[0]  # noqa: E731
    for _ in range(samples):
        name = names[rng.integers(len(names))]
        arr = params[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        num = oracles.central_difference(f, arr, idx, h)
        ana = grads[name][idx]
        assert abs(ana - num) <= 1e-3 * max(abs(num), 1e-6), (name, idx, ana, num)


def test_gradient_check_dense(rng):
    model = toy_model()
    head = distill.make_head(8, 16, 0)
    head.astype(np.float64)
    data = toy_data()
    x = np.stack([d.spectrogram for d in data[:3]]).astype(np.float64)
    y = np.stack([d.target for d in data[:3]]).astype(np.float64)
    _grad_check(model, head, x, y, ["bottleneck.kernel", "bottleneck.bias", "head.kernel", "head.bias"], rng)


def test_gradient_check_lowrank(rng):
    model = toy_model(compressed=True)
    model.bottleneck.lam = 0.4
    head = distill.make_head(8, 16, 0)
    data = toy_data()
    x = np.stack([d.spectrogram for d in data[:3]]).astype(np.float64)
    y = np.stack([d.target for d in data[:3]]).astype(np.float64)
    _grad_check(model, head, x, y, ["bottleneck.U", "bottleneck.V", "bottleneck.kernel", "head.kernel"], rng)


def test_gradient_check_trunk(rng):
    model = toy_model()
    head = distill.make_head(8, 16, 0)
    data = toy_data()
    x = np.stack([d.spectrogram for d in data[:2]]).astype(np.float64)
    y = np.stack([d.target for d in data[:2]]).astype(np.float64)
    names = [k for k in model.params() if not k.startswith("bottleneck")]
    # smaller step so the probe rarely straddles an hswish/relu kink
    _grad_check(model, head, x, y, names, rng, h=1e-5)


def _short_cfg(**kw):
    base = dict(batch_size=4, lr0=1e-3, epochs=3, teacher_dim=16, seed=3)
    base.update(kw)
    return distill.TrainConfig(**base)


def test_training_is_deterministic():
    a = distill.train(toy_model(), toy_data(), _short_cfg()).loss_history
    b = distill.train(toy_model(), toy_data(), _short_cfg()).loss_history
    assert len(a) == 6  # 6 examples in batches of 4 keep the partial tail
    assert np.array(a).tobytes() == np.array(b).tobytes()


def test_max_steps():
    res = distill.train(toy_model(), toy_data(), _short_cfg(max_steps=4))
    assert res.steps == 4 and len(res.loss_history) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    data = toy_data()
    data[0] = distill.DistillExample(data[0].spectrogram, data[0].target * 1e30)
    with pytest.raises(DivergenceError) as e:
        distill.train(toy_model(), data, _short_cfg(batch_size=6))
    assert e.value.step == 0


def test_teacher_dim_mismatch():
    with pytest.raises(ShapeError):
        distill.train(toy_model(), toy_data(), _short_cfg(teacher_dim=12288))


def test_compressed_training_anneals_and_finalizes():
    seen = []
    model = toy_model(compressed=True)
    cb = lambda step, loss: seen.append(model.bottleneck.lam)  # noqa: E731
    res = distill.train(model, toy_data(), _short_cfg(epochs=4, anneal_epochs=2), callback=cb)
    assert seen[0] == 1.0 and seen[-1] == 0.0
    assert all(a >= b for a, b in zip(seen, seen[1:]))
    bott = res.model.bottleneck
    assert isinstance(bott, LowRankDense) and bott.finalized and bott.W is None


def test_qat_switches_on_at_second_epoch():
    flags = []
    model = toy_model(qat=True)
    cb = lambda step, loss: flags.append(model.bottleneck.qat)  # noqa: E731
    res = distill.train(model, toy_data(), _short_cfg(), callback=cb)
    assert flags == [False, False, True, True, True, True]
    assert isinstance(res.model.bottleneck, QuantizedDense)


def test_comp_qat_exports_int8_factors():
    res = distill.train(toy_model(compressed=True, qat=True), toy_data(), _short_cfg())
    assert isinstance(res.model.bottleneck, QuantizedLowRankDense)


def test_export_has_no_teacher_dim_tensors():
    res = distill.train(toy_model(emb=8), toy_data(dim=27), _short_cfg(max_steps=2, teacher_dim=27))
    for name, t in res.model.tensors().items():
        assert 27 not in t.shape, name
    out = zoo.forward(res.model, np.zeros((96, 64), np.float32))
    assert out.shape == (8,)


def test_dataset_round_trip(tmp_path):
    data = toy_data(n=3)
    path = tmp_path / "d.bin"
    distill.write_dataset(path, data)
    back = distill.read_dataset(path)
    assert len(back) == 3
    for a, b in zip(data, back):
        assert a.spectrogram.tobytes() == b.spectrogram.tobytes()
        assert a.target.tobytes() == b.target.tobytes()


def test_dataset_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(ValueError, match="magic"):
        distill.read_dataset(path)


def test_csv_pair_directory(tmp_path):
    spec = np.arange(12, dtype=np.float32).reshape(4, 3)
    np.savetxt(tmp_path / "a.spec.csv", spec, delimiter=",")
    (tmp_path / "a.target.csv").write_text("1.5,2.5\n")
    (ex,) = distill.read_dataset(tmp_path)
    np.testing.assert_array_equal(ex.spectrogram, spec)
    np.testing.assert_array_equal(ex.target, [1.5, 2.5])
