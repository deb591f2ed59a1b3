from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shuflab import fxnet
from shuflab.entropy import ScriptedSource
from shuflab.errors import ConfigurationError
from shuflab.fxnet import (ONE, RAW_MAX, RAW_MIN, Activation, FixedPoint, Layer, LayerKind, LayerSpec,
                           Network, Sequential, HardwareShuffled, SoftwareShuffled)
from shuflab.shufcore import ShufflerUnit

raw16 = st.integers(RAW_MIN, RAW_MAX)


def exact_mul(a: int, b: int) -> int:
    """Round-half-away-from-zero of a*b/2^11 via rationals, then saturate."""
    q = Fraction(a * b, 2 ** 11)
    mag = abs(q)
    r = int(mag) + (1 if mag - int(mag) >= Fraction(1, 2) else 0)
    r = r if q >= 0 else -r
    return max(RAW_MIN, min(RAW_MAX, r))


def fc(weights, biases, act="None"):
    w = np.asarray(weights)
    return Layer(LayerKind.FC, (w.shape[1], w.shape[0]), w, biases, act)


class TestArithmetic:
    def test_identity_and_zero(self):
        one = FixedPoint.from_float(1.0)
        assert fxnet.fxp_mul(one, one).raw == ONE
        assert fxnet.fxp_mul(FixedPoint.from_float(0.7), FixedPoint.from_float(0.0)).raw == 0

    def test_half_times_quarter(self):
        assert fxnet.mul_raw(1024, 512) == 256
        assert fxnet.to_float(fxnet.mul_raw(1024, 512)) == 0.125

    @given(raw16, raw16)
    @settings(max_examples=2000)
    def test_mul_matches_rational_oracle(self, a, b):
        assert fxnet.mul_raw(a, b) == exact_mul(a, b)

    def test_vector_mul_matches_scalar(self):
        rng = np.random.default_rng(3)
        a = rng.integers(RAW_MIN, RAW_MAX + 1, 5000)
        b = rng.integers(RAW_MIN, RAW_MAX + 1, 5000)
        assert np.array_equal(fxnet.mul_raw_array(a, b), [exact_mul(int(x), int(y)) for x, y in zip(a, b)])

    def test_to_raw_rounds_and_saturates(self):
        assert fxnet.to_raw(1.0) == 2048
        assert fxnet.to_raw(-0.5) == -1024
        assert fxnet.to_raw(100.0) == RAW_MAX
        assert fxnet.to_raw(-100.0) == RAW_MIN
        assert fxnet.to_raw(1.5 / 2048) == 2      # half away from zero
        assert fxnet.to_raw(-1.5 / 2048) == -2

    def test_wrap_and_saturate(self):
        assert fxnet.wrap32(2 ** 31) == -2 ** 31
        assert fxnet.saturate16(40000) == RAW_MAX
        assert fxnet.saturate16(-40000) == RAW_MIN


class TestActivations:
    def test_relu(self):
        assert list(fxnet.activate("ReLU", [-5, 0, 7])) == [0, 0, 7]

    def test_sigmoid_tanh_monotone_and_bounded(self):
        z = np.arange(RAW_MIN, RAW_MAX + 1, 97)
        for kind, lo in ((Activation.SIGMOID, 0), (Activation.TANH, -ONE)):
            y = fxnet.activate(kind, z)
            assert np.all(np.diff(y) >= 0)
            assert y.min() >= lo and y.max() <= ONE

    def test_lut_matches_bin_centre_oracle(self):
        z = np.arange(RAW_MIN, RAW_MAX + 1, 37)
        centre = ((np.clip((z >> 8) + 128, 0, 255) - 128) * 256 + 128) / ONE
        for kind, f in ((Activation.SIGMOID, lambda v: 1 / (1 + np.exp(-v))), (Activation.TANH, np.tanh)):
            assert np.max(np.abs(fxnet.activate(kind, z) - f(centre) * ONE)) <= 1

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            y = fxnet.activate("Softmax", rng.integers(-4000, 4000, 10))
            assert abs(int(y.sum()) - ONE) <= 10
            assert np.all(y >= 0)


class TestLayers:
    def test_single_relu_neuron(self):
        layer = fc([[ONE]], [0], "ReLU")
        assert fxnet.fc_forward(layer, [ONE // 2], Sequential(), Sequential())[0] == ONE // 2

    def test_two_by_two_hand_computed(self):
        # w = [[0.5, -0.25], [1.0, 0.75]], b = [0.125, -1], x = [1, 0.5]
        layer = fc([[1024, -512], [2048, 1536]], [256, -2048])
        out = fxnet.fc_forward(layer, [2048, 1024], Sequential(), Sequential())
        assert list(out) == [1024 - 256 + 256, 2048 + 768 - 2048]

    def test_identity_conv(self):
        x = np.random.default_rng(1).integers(-ONE, ONE, (5, 5, 1))
        layer = Layer(LayerKind.CONV, (1, 1, 1, 1), [[[[ONE]]]], [0])
        srcs = [Sequential()] * 4
        assert np.array_equal(fxnet.conv_forward(layer, x, *srcs), x)

    def test_conv_3x3_on_4x4(self):
        x = np.arange(16).reshape(4, 4, 1) * 128
        k = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]]) * ONE
        layer = Layer(LayerKind.CONV, (3, 3, 1, 1), k.reshape(1, 1, 3, 3), [0])
        out = fxnet.conv_forward(layer, x, *[Sequential()] * 4)
        expected = np.zeros((2, 2))
        for r in range(2):
            for c in range(2):
                expected[r, c] = (x[r:r + 3, c:c + 3, 0] * k / ONE).sum()
        assert np.array_equal(out[..., 0], expected)
        assert np.array_equal(out, fxnet.conv_reference(layer, x))

    def test_maxpool(self):
        layer = Layer(LayerKind.POOL, (2, 2))
        assert fxnet.maxpool_forward(layer, np.array([[1, 2], [3, 4]]).reshape(2, 2, 1),
                                     *[Sequential()] * 3)[0, 0, 0] == 4
        const = np.full((4, 4, 2), 77)
        assert np.all(fxnet.maxpool_forward(layer, const, *[Sequential()] * 3) == 77)

    def test_bad_shapes_rejected(self):
        with pytest.raises(ConfigurationError):
            Layer(LayerKind.FC, (3, 2), np.zeros(5), np.zeros(2))
        with pytest.raises(ConfigurationError):
            Layer(LayerKind.POOL, (3, 3))


class TestOrderInvariance:
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 31))
    @settings(max_examples=60, deadline=None)
    def test_fc_any_order(self, n_in, n_out, seed):
        rng = np.random.default_rng(seed)
        layer = fc(rng.integers(RAW_MIN, RAW_MAX + 1, (n_out, n_in)), rng.integers(RAW_MIN, RAW_MAX + 1, n_out))
        x = rng.integers(RAW_MIN, RAW_MAX + 1, n_in)
        ref = fxnet.fc_forward(layer, x, Sequential(), Sequential())
        sw = fxnet.fc_forward(layer, x, SoftwareShuffled(ScriptedSource(rng.integers(0, 2 ** 14, 64).tolist())),
                              SoftwareShuffled(ScriptedSource(rng.integers(0, 2 ** 14, 4096).tolist())))
        from shuflab.entropy import PhiloxSource
        unit = ShufflerUnit(PhiloxSource(seed), k=4)
        hw = fxnet.fc_forward(layer, x, HardwareShuffled(unit, 0), HardwareShuffled(unit, 1))
        assert np.array_equal(ref, sw) and np.array_equal(ref, hw)
        assert np.array_equal(ref, fxnet.activate("None", fxnet.fc_preactivation(layer, x[None])[0]))

    def test_conv_net_modes_agree(self):
        net = fxnet.random_network((8, 8, 2), [LayerSpec("Conv2D", (3, 3, 2, 3), "ReLU"),
                                               LayerSpec("MaxPool", (2, 2)),
                                               LayerSpec("FC", (27, 4), "Tanh")], seed=5)
        x = fxnet.random_inputs((8, 8, 2), 1, 9)[0]
        outs = {m: fxnet.network_infer(net, x, m, seed=2)[0] for m in ("baseline", "swshuffle", "hwshuffle")}
        assert np.array_equal(outs["baseline"], outs["swshuffle"])
        assert np.array_equal(outs["baseline"], outs["hwshuffle"])
        assert np.array_equal(outs["baseline"], fxnet.forward_batch(net, x[None])[0])


class TestNetworks:
    def test_identity_network_echoes(self):
        net = Network((3,), [fc(np.eye(3, dtype=int) * ONE, [0, 0, 0])])
        out, cls = fxnet.network_infer(net, [100, -200, 300])
        assert list(out) == [100, -200, 300] and cls == 2

    def test_full_size_mlp_runs(self):
        net = fxnet.mlp([768, 128, 10], seed=0, output="Softmax")
        out, cls = fxnet.network_infer(net, fxnet.random_inputs((768,), 1, 0)[0])
        assert out.shape == (10,) and 0 <= cls < 10

    def test_save_load_roundtrip(self, tmp_path):
        net = fxnet.random_network((6, 6, 1), [LayerSpec("Conv2D", (3, 3, 1, 2), "ReLU"),
                                               LayerSpec("MaxPool", (2, 2)),
                                               LayerSpec("FC", (8, 3), "Softmax")], seed=4, name="rt")
        back = fxnet.load_network(fxnet.save_network(net, tmp_path / "n.json"))
        assert back.name == "rt" and back.input_shape == net.input_shape
        for a, b in zip(net.layers, back.layers):
            assert a.kind == b.kind and a.dims == b.dims and a.activation == b.activation
            if a.weights is not None:
                assert np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)

    def test_labeled_dataset_is_balanced(self):
        net = fxnet.balance_output_biases(fxnet.mlp([8, 6, 4], seed=3), seed=3)
        X, y = fxnet.labeled_dataset(net, 20, seed=1)
        assert np.array_equal(np.bincount(y), [20] * 4)
        assert fxnet.accuracy(net, X, y) == 1.0
