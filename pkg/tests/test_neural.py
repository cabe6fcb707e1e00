import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddqn_trading.errors import (
    ArchitectureMismatch,
    CheckpointMismatch,
    KernelTooLarge,
    ShapeMismatch,
    StaleCache,
)
from ddqn_trading.neural import (
    SGD,
    Adam,
    Checkpoint,
    DuelingNet,
    NetSpec,
    conv1d_forward,
    conv_out_len,
    dueling_aggregate,
    gradcheck,
    random_gradcheck_case,
    sgd_update,
    sync_target,
)

SMALL_FF = NetSpec("ffdqn", hidden=(5, 4))
SMALL_CNN = NetSpec("cnn", hidden=(4,), conv_channels=(3, 2), conv_kernels=(3, 2), conv_strides=(1, 2))


def build(spec, seed=0, channels=3, window=6, random_bias=True):
    rng = np.random.default_rng(seed)
    net = DuelingNet.build(spec, channels, window, rng)
    if random_bias:
        for k in net.params:
            if k.endswith(".b"):
                net.params[k] = rng.normal(0, 0.3, net.params[k].shape)
        net.mark_updated()
    return net


# ---- pure-python oracles: no numpy linear algebra


def py_dense(x, w, b):
    return [sum(x[i] * w[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]


def py_relu(x):
    return [v if v > 0 else 0.0 for v in x]


def py_conv(img, w, b, stride):
    out_ch, in_ch, k = len(w), len(w[0]), len(w[0][0])
    n = len(img[0])
    length = (n - k) // stride + 1
    return [
        [
            b[o] + sum(w[o][c][j] * img[c][t * stride + j] for c in range(in_ch) for j in range(k))
            for t in range(length)
        ]
        for o in range(out_ch)
    ]


def py_forward(net, x):
    p = {k: v.tolist() for k, v in net.params.items()}
    x = list(x)
    if net.arch_tag == "cnn":
        cn = net.n_channels * net.window_n
        img = [x[c * net.window_n : (c + 1) * net.window_n] for c in range(net.n_channels)]
        for layer in net.conv_layers:
            if layer.kind == "conv1d":
                img = py_conv(img, p[f"{layer.name}.W"], p[f"{layer.name}.b"], layer.stride)
            else:
                img = [py_relu(row) for row in img]
        h = [v for row in img for v in row] + x[cn:]
    else:
        h = x
    for layer in net.dense_layers:
        h = py_dense(h, p[f"{layer.name}.W"], p[f"{layer.name}.b"]) if layer.kind == "dense" else py_relu(h)
    v = py_dense(h, p["value.W"], p["value.b"])[0]
    a = py_dense(h, p["advantage.W"], p["advantage.b"])
    mean_a = sum(a) / len(a)
    return [v + ai - mean_a for ai in a]


class TestForward:
    def test_zero_network(self):
        net = DuelingNet.build(NetSpec("ffdqn"), 3, 10)
        q = net.predict(np.random.default_rng(0).normal(size=(7, net.input_size)))
        assert q.shape == (7, 3) and not q.any()

    @pytest.mark.parametrize("spec", [SMALL_FF, SMALL_CNN])
    def test_duplicated_rows(self, spec):
        net = build(spec)
        x = np.random.default_rng(1).normal(size=(1, net.input_size))
        q = net.predict(np.vstack([x, x]))
        assert q[0].tobytes() == q[1].tobytes()

    @pytest.mark.parametrize("spec", [SMALL_FF, SMALL_CNN])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_python_oracle(self, spec, seed):
        net = build(spec, seed)
        x = np.random.default_rng(seed + 100).normal(size=(3, net.input_size))
        q = net.predict(x)
        for b in range(3):
            np.testing.assert_allclose(q[b], py_forward(net, x[b]), rtol=0, atol=1e-10)

    def test_shape_mismatch(self):
        net = build(SMALL_FF)
        with pytest.raises(ShapeMismatch):
            net.forward(np.zeros((2, net.input_size + 1)))

    def test_deterministic(self):
        net = build(SMALL_CNN)
        x = np.random.default_rng(3).normal(size=(5, net.input_size))
        assert net.predict(x).tobytes() == net.predict(x).tobytes()

    def test_heads_compose_to_q(self):
        net = build(SMALL_FF, 4)
        x = np.random.default_rng(4).normal(size=(6, net.input_size))
        v, a = net.heads(x)
        np.testing.assert_allclose(net.predict(x), v + a - a.mean(axis=1, keepdims=True), atol=1e-12)


class TestDuelingAggregate:
    def test_example(self):
        np.testing.assert_allclose(dueling_aggregate(np.array([[1.0]]), np.array([[2.0, 0.0, 1.0]])), [[2, 0, 1]])

    def test_constant_advantage(self):
        assert dueling_aggregate(np.array([3.0]), np.array([[5.0, 5.0, 5.0]])).tolist() == [[3.0, 3.0, 3.0]]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dueling_aggregate(np.zeros((2, 1)), np.zeros((3, 3)))

    @given(
        arrays(np.float64, (4, 1), elements=st.floats(-1e3, 1e3)),
        arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)),
        st.floats(-1e3, 1e3),
    )
    def test_identifiability_and_shift(self, v, a, c):
        q = dueling_aggregate(v, a)
        np.testing.assert_allclose((q - v).mean(axis=1), 0.0, atol=1e-9)
        # rounding can merge near-ties, but the advantage argmax is always a Q maximizer
        rows = np.arange(4)
        assert (q[rows, a.argmax(axis=1)] == q.max(axis=1)).all()
        np.testing.assert_allclose(dueling_aggregate(v, a + c), q, rtol=0, atol=1e-12 * max(1.0, abs(c)) * 1e3)


class TestConv:
    def test_identity_kernel(self):
        x = np.array([[1.0, -2.0, 3.5, 0.25]])
        y = conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(y, x)

    def test_difference_kernel(self):
        y = conv1d_forward(np.array([[1.0, 2.0, 3.0, 4.0]]), np.array([[[1.0, -1.0]]]), np.zeros(1))
        assert y.tolist() == [[-1.0, -1.0, -1.0]]

    def test_multi_channel_against_oracle(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(3, 9)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
        y = conv1d_forward(x, w, b, stride=2)
        np.testing.assert_allclose(y, py_conv(x.tolist(), w.tolist(), b.tolist(), 2), atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(KernelTooLarge):
            conv1d_forward(np.zeros((1, 2)), np.zeros((1, 1, 3)), np.zeros(1))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            conv1d_forward(np.zeros((2, 5)), np.zeros((1, 3, 2)), np.zeros(1))

    @given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 5))
    def test_shape_law(self, n, k, stride):
        if k > n:
            return
        y = conv1d_forward(np.zeros((2, n)), np.zeros((3, 2, k)), np.zeros(3), stride)
        assert y.shape == (3, (n - k) // stride + 1) == (3, conv_out_len(n, k, stride))


class TestBackward:
    def test_zero_upstream(self):
        net = build(SMALL_CNN)
        x = np.random.default_rng(0).normal(size=(3, net.input_size))
        _, cache = net.forward(x)
        grads = net.backward(cache, np.zeros((3, 3)))
        assert all(not g.any() for g in grads.values())
        assert {k: g.shape for k, g in grads.items()} == {k: p.shape for k, p in net.params.items()}

    def test_linear_net_sum_loss(self):
        # no hidden layers: q = x Wv + bv + (x Wa + ba - mean)
        net = build(NetSpec("ffdqn", hidden=()), 0)
        x = np.random.default_rng(1).normal(size=(5, net.input_size))
        _, cache = net.forward(x)
        g = net.backward(cache, np.ones((5, 3)))
        np.testing.assert_allclose(g["value.W"][:, 0], 3.0 * x.sum(axis=0), atol=1e-12)
        assert g["value.b"].tolist() == [15.0]
        np.testing.assert_allclose(g["advantage.W"], 0.0, atol=1e-12)

    def test_stale_cache(self):
        net = build(SMALL_FF)
        x = np.ones((1, net.input_size))
        _, cache = net.forward(x)
        SGD(0.1).step(net, net.backward(cache, np.ones((1, 3))))
        with pytest.raises(StaleCache):
            net.backward(cache, np.ones((1, 3)))

    def test_cache_from_other_net(self):
        a, b = build(SMALL_FF, 0), build(SMALL_FF, 1)
        _, cache = a.forward(np.ones((1, a.input_size)))
        with pytest.raises(StaleCache):
            b.backward(cache, np.ones((1, 3)))


class TestGradcheck:
    def test_linear_net_linear_loss(self):
        net = build(NetSpec("ffdqn", hidden=()), 2)
        x = np.random.default_rng(2).normal(size=(3, net.input_size))
        w = np.random.default_rng(3).normal(size=(3, 3))

        def loss(q):
            return float(np.sum(w * q)), w

        # central differences are exact for a linear map; a wide step keeps rounding small
        assert gradcheck(net, x, loss, h=1e-2) < 1e-9

    @pytest.mark.parametrize("arch", ["ffdqn", "cnn"])
    def test_random_nets(self, arch):
        net, x = random_gradcheck_case(arch, 11)
        assert gradcheck(net, x) < 1e-4

    def test_strided_cnn(self):
        net = build(SMALL_CNN, 5)
        x = np.random.default_rng(5).normal(size=(3, net.input_size))
        assert gradcheck(net, x) < 1e-4

    def test_fault_injection(self):
        net, x = random_gradcheck_case("ffdqn", 3)

        def corrupt(grads):
            g = grads["fc0.W"].reshape(-1)
            g[np.argmax(np.abs(g))] *= 2.0

        assert gradcheck(net, x, grad_hook=corrupt) > 0.4

    def test_does_not_mutate_net(self):
        net, x = random_gradcheck_case("cnn", 0)
        before = {k: v.copy() for k, v in net.params.items()}
        gradcheck(net, x)
        assert all((net.params[k] == before[k]).all() for k in before)


class TestUpdates:
    def test_sgd_examples(self):
        p = {"w": np.array([1.0])}
        g = {"w": np.array([2.0])}
        assert sgd_update(p, g, 0.0)["w"].tolist() == [1.0]
        assert sgd_update(p, g, 0.1)["w"].tolist() == [pytest.approx(0.8)]
        twice = sgd_update(sgd_update(p, g, 0.1), g, 0.1)
        assert twice["w"][0] == pytest.approx(1.0 - 2 * 0.1 * 2.0)

    def test_sgd_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            sgd_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.1)

    def test_adam_first_step_is_signed_lr(self):
        net = build(SMALL_FF)
        before = {k: v.copy() for k, v in net.params.items()}
        grads = {k: np.random.default_rng(0).normal(size=v.shape) for k, v in net.params.items()}
        Adam(lr=1e-3).step(net, grads)
        for k in before:
            # bias-corrected first step: m_hat / sqrt(v_hat) = g / |g|
            expected = before[k] - 1e-3 * grads[k] / (np.abs(grads[k]) + 1e-8)
            np.testing.assert_allclose(net.params[k], expected, rtol=1e-10, atol=1e-15)

    def test_adam_second_step_matches_formula(self):
        net = build(NetSpec("ffdqn", hidden=()), 0)
        opt = Adam(lr=0.1)
        g1, g2 = 0.3, -0.2
        w0 = net.params["value.b"][0]
        for g in (g1, g2):
            grads = {k: np.zeros_like(v) for k, v in net.params.items()}
            grads["value.b"][:] = g
            opt.step(net, grads)
        m = 0.9 * (0.1 * g1) + 0.1 * g2
        v = 0.999 * (0.001 * g1**2) + 0.001 * g2**2
        m_hat, v_hat = m / (1 - 0.9**2), v / (1 - 0.999**2)
        w1 = w0 - 0.1 * g1 / (abs(g1) + 1e-8)
        assert net.params["value.b"][0] == pytest.approx(w1 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8), rel=1e-7)


class TestSync:
    def test_copy_semantics_and_isolation(self):
        online, target = build(SMALL_CNN, 0), build(SMALL_CNN, 1)
        x = np.random.default_rng(0).normal(size=(4, online.input_size))
        sync_target(online, target)
        assert online.predict(x).tobytes() == target.predict(x).tobytes()
        frozen = target.predict(x).copy()
        q, cache = online.forward(x)
        SGD(0.5).step(online, online.backward(cache, np.ones_like(q)))
        assert target.predict(x).tobytes() == frozen.tobytes()
        assert online.predict(x).tobytes() != frozen.tobytes()

    def test_architecture_mismatch(self):
        ff = DuelingNet.build(NetSpec("ffdqn"), 3, 10)
        cnn = DuelingNet.build(NetSpec.default("cnn"), 3, 10)
        with pytest.raises(ArchitectureMismatch):
            sync_target(ff, cnn)


class TestCheckpoint:
    @pytest.mark.parametrize("spec", [SMALL_FF, SMALL_CNN])
    def test_round_trip(self, spec, tmp_path):
        net = build(spec, 7)
        Checkpoint(net, rng_seed=7, training_step=123).save(tmp_path / "c.json")
        loaded = Checkpoint.load(tmp_path / "c.json")
        assert loaded.rng_seed == 7 and loaded.training_step == 123
        assert loaded.net.same_architecture(net)
        for k in net.params:
            assert loaded.net.params[k].tobytes() == net.params[k].tobytes()
        x = np.random.default_rng(0).normal(size=(2, net.input_size))
        assert loaded.net.predict(x).tobytes() == net.predict(x).tobytes()

    def test_shape_validation(self):
        doc = Checkpoint(build(SMALL_FF)).to_dict()
        doc["parameters"]["fc0.W"] = [[0.0]]
        with pytest.raises(CheckpointMismatch):
            Checkpoint.from_dict(doc)

    def test_document_fields(self):
        doc = Checkpoint(build(SMALL_CNN), rng_seed=1, training_step=2).to_dict()
        assert {"format_version", "arch_tag", "layer_specs", "parameters", "rng_seed", "training_step"} <= set(doc)
        kinds = [s["type"] for s in doc["layer_specs"]]
        assert kinds[0] == "input" and "conv1d" in kinds and "flatten" in kinds


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["ffdqn", "cnn"]))
def test_gradcheck_property(seed, arch):
    net, x = random_gradcheck_case(arch, seed)
    assert gradcheck(net, x) < 1e-4
