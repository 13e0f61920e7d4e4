import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sethash import hashnet
from sethash.dictionary import Dictionary
from sethash.errors import (
    BadMagic,
    CorruptPayload,
    DimensionMismatch,
    InvalidParameter,
    TapeMismatch,
    UnsupportedVersion,
)
from sethash.hashnet import HashNet, backward, binarize, forward, init, sigmoid
from sethash.setfeat import feature_length


def naive_forward(net, f):
    h = np.asarray(f, dtype=np.float64)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = [sum(float(w[r, c]) * h[c] for c in range(w.shape[1])) + float(b[r]) for r in range(w.shape[0])]
        if i == net.num_layers - 1:
            h = np.array([1 / (1 + np.exp(-v)) for v in z])
        else:
            h = np.array([max(v, 0.0) for v in z])
    return h


def random_net(dims, seed, bias=0.1):
    rng = np.random.default_rng(seed)
    net = init(dims, seed=seed, dtype=np.float64)
    for b in net.biases:
        b[:] = rng.uniform(-bias, bias, b.shape)
    return net


class TestInit:
    def test_shapes(self):
        net = init((12, 8, 4))
        assert net.num_layers == 2
        assert net.weights[0].shape == (8, 12) and net.weights[1].shape == (4, 8)
        assert net.code_bits == 4 and net.dims == (12, 8, 4)

    def test_deterministic(self):
        assert init((5, 4, 3), seed=2) == init((5, 4, 3), seed=2)
        assert not init((5, 4, 3), seed=2) == init((5, 4, 3), seed=3)

    def test_reference_widths(self):
        # d=32 with K=13 gives a 544-wide aggregate feeding 512 and 32 units
        width = feature_length(32, 13)
        net = init((width, 512, 32))
        assert net.dims == (544, 512, 32) and net.code_bits == 32

    def test_bounds_and_zero_bias(self):
        net = init((100, 50, 10), seed=0)
        assert np.abs(net.weights[0]).max() <= np.sqrt(6 / 100)
        assert np.abs(net.weights[1]).max() <= np.sqrt(6 / 60)
        assert all(np.all(b == 0) for b in net.biases)

    def test_invalid(self):
        with pytest.raises(InvalidParameter):
            init((5,))
        with pytest.raises(InvalidParameter):
            init((5, 0))


class TestForward:
    def test_zero_network(self):
        net = HashNet([np.zeros((3, 4)), np.zeros((2, 3))], [np.zeros(3), np.zeros(2)])
        h, _ = forward(net, np.arange(4.0))
        np.testing.assert_array_equal(h, 0.5)

    def test_sigmoid_limits(self):
        net = HashNet([np.ones((1, 1))], [np.zeros(1)])
        assert forward(net, np.zeros(1))[0][0] == 0.5
        assert forward(net, np.array([40.0]))[0][0] > 1 - 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive(self, seed):
        net = random_net((7, 5, 3), seed)
        f = np.random.default_rng(seed).standard_normal(7)
        np.testing.assert_allclose(forward(net, f)[0], naive_forward(net, f), atol=1e-6)

    def test_batch_matches_rows(self, rng):
        net = random_net((6, 4, 3), 1)
        f = rng.standard_normal((5, 6))
        hb, _ = forward(net, f)
        for i in range(5):
            np.testing.assert_allclose(hb[i], forward(net, f[i])[0], rtol=1e-12)

    @given(st.floats(-1e4, 1e4), st.integers(0, 1000))
    def test_strictly_inside_unit_interval(self, scale, seed):
        net = random_net((4, 3, 2), seed)
        h, _ = forward(net, np.random.default_rng(seed).standard_normal(4) * scale)
        assert np.all(h > 0) and np.all(h < 1)

    def test_float32_extremes_stay_open(self):
        h = sigmoid(np.array([-200.0, 200.0], dtype=np.float32))
        assert h.dtype == np.float32 and 0 < h[0] and h[1] < 1

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            forward(init((4, 2)), np.zeros(3))

    def test_precision(self):
        net = init((4, 2))
        assert forward(net, np.zeros(4, dtype=np.float32))[0].dtype == np.float32
        assert forward(net, np.zeros(4))[0].dtype == np.float64


class TestBackward:
    def test_zero_upstream(self, rng):
        net = random_net((5, 4, 3), 0)
        _, tape = forward(net, rng.standard_normal(5))
        dws, dbs, gi = backward(net, tape, np.zeros(3))
        assert all(np.all(g == 0) for g in (*dws, *dbs, gi))

    def test_sigmoid_derivative_at_half(self):
        net = HashNet([np.zeros((1, 1))], [np.zeros(1)])
        _, tape = forward(net, np.zeros(1))
        _, dbs, _ = backward(net, tape, np.ones(1))
        assert dbs[0][0] == 0.25

    @pytest.mark.parametrize("seed", range(4))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = random_net((6, 5, 4, 3), seed)
        f = rng.standard_normal(6)
        probe = rng.standard_normal(3)
        _, tape = forward(net, f)
        assert all(np.min(np.abs(z)) > 1e-6 for z in tape.preacts[:-1])
        dws, dbs, gi = backward(net, tape, probe)

        def loss(net, f):
            return float(forward(net, f)[0] @ probe)

        step = 1e-5
        for analytic, param in zip([*dws, *dbs], [*net.weights, *net.biases]):
            num = np.zeros_like(param)
            for idx in np.ndindex(*param.shape):
                orig = param[idx]
                param[idx] = orig + step
                up = loss(net, f)
                param[idx] = orig - step
                down = loss(net, f)
                param[idx] = orig
                num[idx] = (up - down) / (2 * step)
            rel = np.abs(analytic - num) / np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-7)
            assert rel.max() <= 1e-4
        num = np.array([(loss(net, f + step * e) - loss(net, f - step * e)) / (2 * step) for e in np.eye(6)])
        np.testing.assert_allclose(gi, num, rtol=1e-4, atol=1e-9)

    def test_relu_subgradient_at_zero(self):
        net = HashNet([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
        _, tape = forward(net, np.zeros(1))
        dws, dbs, gi = backward(net, tape, np.ones(1))
        assert dbs[0][0] == 0 and gi[0] == 0

    def test_skip_input_gradient(self, rng):
        net = random_net((4, 3, 2), 0)
        _, tape = forward(net, rng.standard_normal((2, 4)))
        assert backward(net, tape, np.ones((2, 2)), input_grad=False)[2] is None

    def test_tape_from_other_net(self, rng):
        _, tape = forward(init((4, 3, 2)), rng.standard_normal(4))
        with pytest.raises(TapeMismatch):
            backward(init((4, 5, 2)), tape, np.ones(2))


class TestBinarize:
    def test_threshold_is_strict(self):
        np.testing.assert_array_equal(binarize(np.array([0.7, 0.3, 0.5])), [True, False, False])

    def test_all_high(self):
        assert binarize(np.full(5, 0.9)).all()

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
    def test_idempotent(self, values):
        b = binarize(np.array(values))
        np.testing.assert_array_equal(binarize(b.astype(np.float64)), b)

    @given(st.lists(st.floats(0.001, 0.999), min_size=2, max_size=20), st.integers(0, 1000))
    def test_differences_only_where_threshold_crossed(self, values, seed):
        h1 = np.array(values)
        h2 = np.clip(h1 + np.random.default_rng(seed).normal(0, 0.2, h1.shape), 0.001, 0.999)
        diff = binarize(h1) != binarize(h2)
        crossed = (h1 > 0.5) != (h2 > 0.5)
        np.testing.assert_array_equal(diff, crossed)


class TestModelFile:
    def _pair(self):
        net = init((10, 6, 4), seed=3)
        net.biases[0][:] = np.linspace(-1, 1, 6)
        return net, Dictionary(np.arange(6.0).reshape(3, 2))

    def test_round_trip(self, tmp_path):
        net, d = self._pair()
        p = tmp_path / "m.shsh"
        hashnet.save_model(net, d, p)
        net2, d2 = hashnet.load_model(p)
        assert net2 == net and d2 == d
        assert hashnet.model_to_bytes(net2, d2) == p.read_bytes()

    def test_layout(self):
        net, d = self._pair()
        raw = hashnet.model_to_bytes(net, d)
        assert raw[:4] == b"SHSH"
        off = 8 + 8 + 4 * 6
        assert struct.unpack_from("<I", raw, off)[0] == 2
        assert struct.unpack_from("<3I", raw, off + 4) == (10, 6, 4)
        body = off + 4 + 12
        np.testing.assert_array_equal(np.frombuffer(raw, "<f4", 60, body).reshape(6, 10), net.weights[0])
        assert len(raw) == body + 4 * (60 + 6 + 24 + 4)

    @pytest.mark.parametrize("cut", [1, 5, 40])
    def test_truncated(self, cut):
        raw = hashnet.model_to_bytes(*self._pair())
        with pytest.raises(CorruptPayload):
            hashnet.model_from_bytes(raw[:-cut])

    def test_version_zero(self):
        raw = bytearray(hashnet.model_to_bytes(*self._pair()))
        raw[4:8] = struct.pack("<I", 0)
        with pytest.raises(UnsupportedVersion):
            hashnet.model_from_bytes(bytes(raw))

    def test_bad_magic(self):
        with pytest.raises(BadMagic):
            hashnet.model_from_bytes(b"SDIC" + bytes(40))

    def test_trailing(self):
        with pytest.raises(CorruptPayload):
            hashnet.model_from_bytes(hashnet.model_to_bytes(*self._pair()) + b"x")
