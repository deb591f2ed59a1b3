"""Experiment runners shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import fxnet
from .cpa.attack import WeightCandidateSet, attack_network
from .cpa.segment import ShapeHints, mean_trace, segment_trace
from .cpa.stats import correlation_scan
from .leaksim import LeakModel, PowerTrace, measure_overhead, trace_infer
from .presets import PRESETS, Preset


def trace_seed(seed: int, index: int) -> int:
    """Per-trace simulator seed derived from an experiment seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint32)[0])


def generate_traces(net: fxnet.Network, mode: str, count: int, seed: int, model: LeakModel,
                    k: int = 16, bits: int = 14, inputs=None, annotate: bool = False
                    ) -> tuple[list[PowerTrace], np.ndarray]:
    """``count`` traces on random inputs; inputs and per-trace seeds follow from ``seed``."""
    if inputs is None:
        inputs = fxnet.random_inputs(net.input_shape, count, seed)
    traces = [trace_infer(net, inputs[d], mode, model, trace_seed(seed, d), k, bits, annotate=annotate)
              for d in range(count)]
    return traces, np.asarray(inputs)


# -- shuffling efficacy on a single neuron -------------------------------------

@dataclass
class PgeCurves:
    ks: list[int]
    checkpoints: np.ndarray
    pge: np.ndarray          # (seeds, k, checkpoints, weights)
    rho_max: np.ndarray
    rho_correct: np.ndarray

    def mean_pge(self) -> np.ndarray:
        """(k, checkpoints) averaged over seeds and weights."""
        return self.pge.mean(axis=(0, 3))

    def rows(self) -> list[tuple]:
        mp = self.mean_pge()
        rm = self.rho_max.mean(axis=(0, 3))
        rc = self.rho_correct.mean(axis=(0, 3))
        return [(k, int(n), float(mp[a, b]), float(rm[a, b]), float(rc[a, b]))
                for a, k in enumerate(self.ks) for b, n in enumerate(self.checkpoints)]


def pge_curve(n: int = 16, ks: Sequence[int] = (1, 2, 4, 8, 16), traces: int = 200,
              seeds: Sequence[int] = range(20), sigma: float = 0.25,
              checkpoints: Sequence[int] | None = None,
              candidates: WeightCandidateSet = WeightCandidateSet()) -> PgeCurves:
    """CPA on an ``n``-input neuron whose MAC loop runs through a k-bin hardware shuffler.

    Inputs and noise are shared across k for a given seed, so curves differ only
    by the degree of shuffling. k=1 is the unshuffled reference.
    """
    cps = np.asarray(checkpoints if checkpoints is not None else list(range(10, traces + 1, 10)))
    model = LeakModel(1.0, sigma, 10.0)
    shape = (len(seeds), len(ks), len(cps), n)
    pge = np.zeros(shape, dtype=np.int64)
    rmax = np.zeros(shape)
    rcor = np.zeros(shape)
    for si, seed in enumerate(seeds):
        net = fxnet.mlp([n, 1], seed=seed, output="ReLU", name=f"neuron-{n}")
        X = fxnet.random_inputs((n,), traces, seed + 7919)
        cols = []
        for k in ks:
            tr, _ = generate_traces(net, "hwshuffle", traces, seed, model, k=k, inputs=X)
            seg = segment_trace(mean_trace(tr), ShapeHints(mode="hwshuffle"))[0]
            S = np.stack([t.samples[seg.mac_points] for t in tr]).astype(np.float64)
            cols.append(S)
        w = net.layers[0].weights[0]
        for j in range(n):
            T = np.stack([c[:, j] for c in cols], axis=1)
            res = correlation_scan(X[:, j], T, candidates.values, checkpoints=cps,
                                   correct=[int(w[j])] * len(ks), top=1,
                                   level=(model.baseline, model.alpha))
            pge[si, :, :, j] = res.pge.T
            rmax[si, :, :, j] = res.rho_max.T
            rcor[si, :, :, j] = res.rho_correct.T
    return PgeCurves(list(ks), cps, pge, rmax, rcor)


# -- overhead table -------------------------------------------------------------

def overhead_table(presets: Sequence[Preset] | None = None, seed: int = 0, k: int = 16) -> list[dict]:
    rows = []
    for p in presets or PRESETS.values():
        net = p.build(seed)
        rows.append({
            "network": p.name,
            "conv_heavy": p.conv_heavy,
            "baseline": 0.0,
            "swshuffle": 100 * measure_overhead(net, "swshuffle", seed=seed, k=k),
            "hwshuffle": 100 * measure_overhead(net, "hwshuffle", seed=seed, k=k),
        })
    return rows


# -- accuracy of networks rebuilt from traces ----------------------------------

@dataclass
class AccuracyResult:
    true: float
    baseline: float
    hwshuffle: float
    chance: float
    baseline_identical: bool


def accuracy_collapse(sizes: Sequence[int] = (16, 12, 10), traces: int = 100, per_class: int = 50,
                      sigma: float = 0.25, seed: int = 0, k: int = 16) -> AccuracyResult:
    """Rebuild a classifier from Baseline and HWShuffle traces and score both on labelled data."""
    net = fxnet.mlp(list(sizes), seed=seed, output="None", name="classifier")
    net = fxnet.balance_output_biases(net, seed)
    X, y = fxnet.labeled_dataset(net, per_class, seed + 1)
    model = LeakModel(1.0, sigma, 10.0)
    acc = {}
    same = False
    for mode in ("baseline", "hwshuffle"):
        tr, inputs = generate_traces(net, mode, traces, seed + 2, model, k=k)
        rep = attack_network([t.blind() for t in tr], inputs, ShapeHints(mode=mode, layer_sizes=tuple(sizes)))
        if rep.network is None or rep.layer_sizes != list(sizes[1:]):
            acc[mode] = 0.0
            continue
        acc[mode] = fxnet.accuracy(rep.network, X, y)
        if mode == "baseline":
            same = all(np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)
                       and a.activation == b.activation for a, b in zip(rep.network.layers, net.layers))
    return AccuracyResult(fxnet.accuracy(net, X, y), acc["baseline"], acc["hwshuffle"], 1 / sizes[-1], same)
