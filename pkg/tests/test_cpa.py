import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shuflab import cpa, fxnet
from shuflab.cpa import (ShapeHints, WeightCandidateSet, attack_network, classify_activation, count_neurons,
                         correlation_scan, detect_layer_boundary, mean_trace, observe, pearson, pge,
                         rank_candidates, segment_trace)
from shuflab.errors import ConfigurationError, SegmentationError, UndefinedCorrelation
from shuflab.experiments import generate_traces
from shuflab.fxnet import Activation, Layer, LayerKind, Network
from shuflab.leaksim import LeakModel, trace_infer

NOISELESS = LeakModel(1.0, 0.0, 10.0)
SMALL = WeightCandidateSet(-2048, 2047)


class TestPearson:
    def test_examples(self):
        assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.98198, abs=1e-5)

    def test_undefined(self):
        with pytest.raises(UndefinedCorrelation):
            pearson([1, 1, 1], [1, 2, 3])
        with pytest.raises(UndefinedCorrelation):
            pearson([1], [1])

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=30), st.integers(0, 2 ** 31))
    @settings(max_examples=200)
    def test_symmetric_and_bounded(self, xs, seed):
        ys = np.random.default_rng(seed).normal(size=len(xs))
        try:
            r = pearson(xs, ys)
        except UndefinedCorrelation:
            return
        assert abs(r) <= 1
        assert r == pytest.approx(pearson(ys, xs), abs=1e-9)

    def test_matches_numpy(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(2, 200))
        assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1])


class TestRanking:
    def test_pge(self):
        assert pge([5, 3, 9], 5) == 0
        vals = np.arange(-32768, 32768)
        assert pge(vals[::-1], -32768) == 65535
        with pytest.raises(ValueError):
            pge([1, 2], 3)

    @given(st.floats(0.1, 10), st.floats(-50, 50), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_affine_invariance(self, scale, shift, seed):
        rng = np.random.default_rng(seed)
        x = rng.integers(-2048, 2048, 60)
        samples = cpa.product_hypotheses(x, [321])[:, 0] + rng.normal(0, 1.0, 60)
        a, _ = rank_candidates(samples, x, SMALL.values)
        b, _ = rank_candidates(samples * scale + shift, x, SMALL.values)
        assert np.array_equal(a[:50], b[:50])

    def test_scan_matches_full_ranking(self):
        rng = np.random.default_rng(1)
        x = rng.integers(-2048, 2048, 80)
        T = np.stack([cpa.product_hypotheses(x, [w])[:, 0] + rng.normal(0, 1, 80) for w in (100, -700)], 1)
        res = correlation_scan(x, T, SMALL.values, checkpoints=[20, 80], correct=[100, -700], top=5, chunk=1000)
        for c in range(2):
            v, r = rank_candidates(T[:, c], x, SMALL.values)
            assert list(res.top_values[c]) == list(v[:5])
            assert res.pge[-1, c] == pge(v, [100, -700][c])
            assert res.rho_max[-1, c] == pytest.approx(abs(r[0]))

    def test_zero_weight_found_through_level(self):
        rng = np.random.default_rng(2)
        x = rng.integers(-2048, 2048, 50)
        samples = 10.0 + rng.normal(0, 0.3, 50)          # product of x and 0 leaks HW 0
        v, _ = rank_candidates(samples, x, SMALL.values, level=(10.0, 1.0))
        assert v[0] == 0
        v, _ = rank_candidates(samples, x, SMALL.values)
        assert v[0] != 0

    def test_single_weight(self):
        net = Network((1,), [Layer(LayerKind.FC, (1, 1), [[0x1234]], [0], "None")])
        tr, X = generate_traces(net, "baseline", 50, 3, NOISELESS)
        seg = segment_trace(mean_trace(tr))[0]
        ranked, _ = cpa.cpa_recover_weight(tr, X[:, 0], segment=int(seg.mac_points[0]))
        assert ranked[0] == 0x1234


class TestSegmentation:
    def test_six_neurons(self):
        net = fxnet.mlp([5, 6], seed=2, output="ReLU")
        t = trace_infer(net, fxnet.random_inputs((5,), 1, 0)[0], "baseline", NOISELESS)
        assert count_neurons(t) == 6
        assert len(segment_trace(t)) == 6

    def test_single_weight_neuron(self):
        net = fxnet.mlp([1, 1], seed=2, output="None")
        t = trace_infer(net, [700], "baseline", NOISELESS, annotate=True)
        (seg,) = segment_trace(t)
        assert seg.fan_in == 1
        mac = t.notes("mac")[0]["cycle"]
        assert seg.block_starts[0] < mac < seg.entry

    def test_neuron_count_random_widths(self):
        rng = np.random.default_rng(5)
        for i in range(50):
            m = int(rng.integers(2, 65))
            net = fxnet.mlp([int(rng.integers(1, 6)), m], seed=i, output=str(rng.choice(["ReLU", "None", "Tanh"])))
            t = trace_infer(net, fxnet.random_inputs(net.input_shape, 1, i)[0], "baseline", NOISELESS)
            assert count_neurons(t) == m

    @pytest.mark.parametrize("mode", ["baseline", "hwshuffle"])
    def test_segments_match_annotations(self, mode):
        rng = np.random.default_rng(7 if mode == "baseline" else 8)
        for i in range(50):
            sizes = [int(v) for v in rng.integers(1, 9, int(rng.integers(2, 4)))]
            net = fxnet.mlp(sizes, seed=i, output="Softmax" if i % 3 == 0 else "Sigmoid")
            t = trace_infer(net, fxnet.random_inputs((sizes[0],), 1, i)[0], mode, LeakModel(1.0, 0.1), seed=i,
                            annotate=True)
            segs = segment_trace(t.samples, ShapeHints(mode=mode))
            macs = [n["cycle"] for n in t.notes("mac")]
            assert [int(p) for s in segs for p in s.mac_points] == macs
            assert [s.bias_point for s in segs] == [n["cycle"] for n in t.notes("bias_add")]
            assert [s.act_latency for s in segs] == [n["latency"] for n in t.notes("act")]

    def test_software_mode_refused(self):
        with pytest.raises(SegmentationError):
            segment_trace(np.zeros(100), ShapeHints(mode="swshuffle"))

    def test_no_markers(self):
        with pytest.raises(SegmentationError):
            segment_trace(np.full(500, 10.0))

    def test_mean_trace_length_mismatch(self):
        with pytest.raises(SegmentationError):
            mean_trace([np.zeros(3), np.zeros(4)])


class TestActivationClasses:
    def test_bands(self):
        assert classify_activation(6) == {Activation.RELU}
        assert classify_activation(800) == {Activation.SOFTMAX}
        assert classify_activation(189) == {Activation.SIGMOID, Activation.TANH}
        assert classify_activation(100) == {Activation.TANH}
        assert classify_activation(2) == {Activation.NONE}
        assert classify_activation(5000) == {Activation.SOFTMAX}


def layer_traces(sizes, count, seed, sigma=0.0, mode="baseline", output="None"):
    net = fxnet.mlp(list(sizes), seed=seed, output=output)
    tr, X = generate_traces(net, mode, count, seed, LeakModel(1.0, sigma))
    return net, [t.blind() for t in tr], X


class TestBoundary:
    def test_single_layer(self):
        net, tr, X = layer_traces([4, 5], 40, 1)
        obs = observe(tr, segment_trace(mean_trace(tr)))
        assert detect_layer_boundary(obs, X, candidates=SMALL) == 5

    @pytest.mark.parametrize("tau", [0.5, 0.6, 0.7, 0.8, 0.9])
    def test_three_plus_three(self, tau):
        net, tr, X = layer_traces([3, 3, 3], 60, 4)
        obs = observe(tr, segment_trace(mean_trace(tr)))
        assert len(obs) == 6
        assert detect_layer_boundary(obs, X, tau=tau, candidates=SMALL) == 3


class TestAttack:
    def test_two_layer_noiseless(self):
        net, tr, X = layer_traces([8, 5, 3], 60, 2)
        rep = attack_network(tr, X, reference=net, checkpoints=[20, 60])
        assert rep.layer_sizes == [5, 3] and rep.activations == ["ReLU", "None"]
        assert rep.recovered_fraction == 1.0 and np.all(rep.final_pge(True) == 0)
        for a, b in zip(rep.network.layers, net.layers):
            assert np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)

    def test_svm_shaped_layer(self):
        net, tr, X = layer_traces([12, 4], 60, 3)
        rep = attack_network(tr, X, reference=net)
        assert rep.layer_sizes == [4] and rep.recovered_fraction == 1.0

    def test_softmax_output_recovered(self):
        net, tr, X = layer_traces([6, 4, 3], 80, 5, output="Softmax")
        rep = attack_network(tr, X, reference=net)
        assert rep.activations == ["ReLU", "Softmax"] and rep.recovered_fraction == 1.0

    def test_annotated_traces_rejected(self):
        net = fxnet.mlp([3, 2], seed=0)
        tr, X = generate_traces(net, "baseline", 5, 0, NOISELESS, annotate=True)
        with pytest.raises(ConfigurationError):
            attack_network(tr, X)

    def test_hardware_shuffled_flags(self):
        net, tr, X = layer_traces([16, 4], 100, 6, sigma=0.25, mode="hwshuffle")
        rep = attack_network(tr, X, ShapeHints(mode="hwshuffle", layer_sizes=(16, 4)), reference=net)
        assert rep.recovered_fraction < 0.5
        assert any("not recovered" in f for f in rep.flags)

    def test_report_roundtrip(self, tmp_path):
        net, tr, X = layer_traces([4, 2], 30, 7)
        rep = attack_network(tr, X, reference=net, checkpoints=[10, 30], candidates=SMALL)
        js, curves, ranked = rep.write(tmp_path, "r")
        back = cpa.AttackReport.read(js)
        assert back.to_dict() == rep.to_dict()
        assert len(curves.read_text().splitlines()) == 1 + 2 * len(rep.results)
