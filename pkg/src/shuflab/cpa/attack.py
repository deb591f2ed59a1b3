"""Layer-by-layer weight recovery with correlation power analysis."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import AttackUndefined, BoundaryNotFound, ConfigurationError, ShuflabError
from ..fxnet import (RAW_MAX, RAW_MIN, Activation, Layer, LayerKind, Network, activate, mul_raw_array,
                     saturate16, wrap32)
from ..leaksim.model import HW_LUT
from ..leaksim.trace import PowerTrace
from .segment import NeuronSegment, ShapeHints, classify_activation, mean_trace, segment_trace
from .stats import TIE_EPS, correlation_scan, pearson, rank_candidates, sum_hypotheses

DEFAULT_TAU = 0.7


@dataclass(frozen=True)
class WeightCandidateSet:
    lo: int = RAW_MIN
    hi: int = RAW_MAX

    def __post_init__(self):
        if not RAW_MIN <= self.lo <= self.hi <= RAW_MAX:
            raise ConfigurationError(f"candidate range [{self.lo}, {self.hi}] outside int16")

    @property
    def values(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1, dtype=np.int64)

    def __len__(self) -> int:
        return self.hi - self.lo + 1

    def __contains__(self, v) -> bool:
        return self.lo <= v <= self.hi


@dataclass
class NeuronObservation:
    """Samples of one neuron across D traces, columns in canonical weight order."""

    mac: np.ndarray            # (D, fan_in)
    bias: np.ndarray           # (D,)
    out: np.ndarray            # (D,)
    act_latency: int

    @property
    def fan_in(self) -> int:
        return self.mac.shape[1]


@dataclass
class SecretResult:
    layer: int
    neuron: int
    index: int                 # weight index, or -1 for the bias
    ranked: list[tuple[int, float]]
    rho_max: list[float]
    rho_correct: list[float] | None = None
    pge: list[int] | None = None
    correct: int | None = None

    @property
    def best(self) -> int:
        return self.ranked[0][0]

    @property
    def is_bias(self) -> bool:
        return self.index < 0


@dataclass
class AttackReport:
    checkpoints: list[int]
    results: list[SecretResult] = field(default_factory=list)
    layer_sizes: list[int] = field(default_factory=list)
    activations: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    network: Network | None = None

    @property
    def weights(self) -> list[SecretResult]:
        return [r for r in self.results if not r.is_bias]

    @property
    def biases(self) -> list[SecretResult]:
        return [r for r in self.results if r.is_bias]

    def final_pge(self, biases: bool = False) -> np.ndarray:
        rs = self.results if biases else self.weights
        if not rs or rs[0].pge is None:
            raise ValueError("report carries no reference values")
        return np.array([r.pge[-1] for r in rs])

    @property
    def recovered_fraction(self) -> float:
        return float(np.mean(self.final_pge() == 0))

    @property
    def complete(self) -> bool:
        return not self.errors and self.network is not None

    def to_dict(self) -> dict:
        return {
            "checkpoints": self.checkpoints,
            "layer_sizes": self.layer_sizes,
            "activations": self.activations,
            "flags": self.flags,
            "errors": self.errors,
            "results": [asdict(r) for r in self.results],
        }

    def write(self, out_dir: str | Path, stem: str = "report") -> list[Path]:
        """JSON summary plus CSV curves (one row per secret and checkpoint)."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        js = out_dir / f"{stem}.json"
        js.write_text(json.dumps(self.to_dict(), indent=1))
        curves = out_dir / f"{stem}_curves.csv"
        with curves.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "neuron", "index", "traces", "rho_max", "rho_correct", "pge"])
            for r in self.results:
                for k, n in enumerate(self.checkpoints):
                    w.writerow([r.layer, r.neuron, r.index, n, f"{r.rho_max[k]:.6f}",
                                "" if r.rho_correct is None else f"{r.rho_correct[k]:.6f}",
                                "" if r.pge is None else r.pge[k]])
        ranks = out_dir / f"{stem}_ranked.csv"
        with ranks.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "neuron", "index", "rank", "value", "rho"])
            for r in self.results:
                for k, (v, rho) in enumerate(r.ranked):
                    w.writerow([r.layer, r.neuron, r.index, k, v, f"{rho:.6f}"])
        return [js, curves, ranks]

    @classmethod
    def read(cls, path: str | Path) -> "AttackReport":
        doc = json.loads(Path(path).read_text())
        results = [SecretResult(**{**r, "ranked": [tuple(x) for x in r["ranked"]]}) for r in doc["results"]]
        return cls(doc["checkpoints"], results, doc["layer_sizes"], doc["activations"], doc["flags"], doc["errors"])


# -- single-weight API -------------------------------------------------------

def _check_inputs(inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.int64)
    if len(x) < 2:
        raise AttackUndefined("need at least two traces")
    if np.all(x == x[0]):
        raise AttackUndefined("all inputs identical; hypotheses cannot vary")
    return x


def cpa_recover_weight(traces, inputs, candidates: WeightCandidateSet = WeightCandidateSet(),
                       segment: int | None = None, level: tuple[float, float] | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Rank candidates for one weight.

    ``traces`` is either a (D, T) array / list of PowerTrace with ``segment`` the
    leak cycle, or already the (D,) samples at that cycle when segment is None.
    ``inputs`` are the operands multiplied with the weight, one per trace.
    """
    x = _check_inputs(inputs)
    if segment is None:
        samples = np.asarray(traces, dtype=np.float64)
    else:
        samples = np.array([(t.samples if isinstance(t, PowerTrace) else np.asarray(t))[segment]
                            for t in traces], dtype=np.float64)
    return rank_candidates(samples, x, candidates.values, level=level)


# -- network pipeline ---------------------------------------------------------

def _reject_annotated(traces) -> None:
    for t in traces:
        if isinstance(t, PowerTrace) and t.annotations is not None:
            raise ConfigurationError("attacks take blind traces; strip annotations with PowerTrace.blind()")


def observe(traces, segments: list[NeuronSegment]) -> list[NeuronObservation]:
    S = np.stack([t.samples if isinstance(t, PowerTrace) else np.asarray(t) for t in traces]).astype(np.float64)
    return [NeuronObservation(S[:, seg.mac_points], S[:, seg.bias_point], S[:, seg.out_point], seg.act_latency)
            for seg in segments]


def _layer_acc(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Wrapped 32-bit accumulator before the bias, for a batch of inputs."""
    return wrap32(mul_raw_array(x[:, None, :], w[None, :, :]).sum(axis=-1))


def _resolve_activation(obs: NeuronObservation, z: np.ndarray, costs) -> Activation:
    kinds = classify_activation(obs.act_latency, costs)
    if len(kinds) == 1:
        return next(iter(kinds))
    best, best_r = None, -2.0
    for k in sorted(kinds, key=lambda a: a.value):
        hyp = HW_LUT[activate(k, z) & 0xFFFF].astype(np.float64)
        try:
            r = pearson(obs.out, hyp)
        except ShuflabError:
            r = 0.0
        if r > best_r:
            best, best_r = k, r
    return best


def _structural_boundary(fans: Sequence[int], start: int, width_in: int) -> int | None:
    """First b > start so neurons start..b-1 take ``width_in`` inputs and the next layer takes b-start."""
    n = len(fans)
    for b in range(start + 1, n + 1):
        if fans[b - 1] != width_in:
            return None
        if b == n or fans[b] == b - start:
            return b
    return None


def detect_layer_boundary(neurons: Sequence[NeuronObservation], inputs, start: int = 0,
                          tau: float = DEFAULT_TAU, candidates: WeightCandidateSet = WeightCandidateSet()) -> int:
    """Index one past the last neuron (from ``start``) whose best |rho| against input hypotheses reaches tau."""
    scores = _boundary_scores(neurons[start:], _check_inputs(inputs), candidates.values)
    return start + _boundary_from_scores(scores, tau)


def _boundary_scores(neurons, x, cands) -> np.ndarray:
    best = np.zeros((len(neurons), x.shape[1]))
    for j in range(x.shape[1]):
        cols = [n for n, ob in enumerate(neurons) if ob.fan_in > j]
        if not cols:
            break
        T = np.stack([neurons[n].mac[:, j] for n in cols], axis=1)
        res = correlation_scan(x[:, j], T, cands, top=1)
        best[cols, j] = res.rho_max[-1]
    fans = np.array([min(ob.fan_in, x.shape[1]) for ob in neurons])
    return np.array([best[n, :fans[n]].mean() for n in range(len(neurons))])


def _boundary_from_scores(scores, tau) -> int:
    above = scores >= tau
    if len(above) == 0 or not above[0]:
        raise BoundaryNotFound(f"no neuron reaches tau={tau} (best score {scores.max(initial=0):.3f})")
    n = int(np.argmin(above)) if not above.all() else len(above)
    return n


def _tied(values: np.ndarray, rho: np.ndarray) -> list[int]:
    """Leading candidates whose |rho| equals the best one exactly (HW-equivalent weights)."""
    a = np.abs(rho)
    return [int(v) for v, r in zip(values, a) if r >= a[0] - TIE_EPS]


def _break_tie(x, W, n, j, tied, bias_samples, cands, level) -> list[int]:
    """Order tied values of W[n, j] by how well the implied accumulator explains the bias leak."""
    scores = []
    for v in tied:
        row = W[n].copy()
        row[j] = v
        acc = _layer_acc(x, row[None, :])[:, 0]
        res = correlation_scan(acc, bias_samples[:, None], cands, hypothesis=sum_hypotheses, top=1, level=level)
        scores.append(res.rho_max[-1, 0])
    idx = sorted(range(len(tied)), key=lambda i: -round(scores[i] / TIE_EPS))   # stable: keeps magnitude order
    return [tied[i] for i in idx]


def recover_layers(neurons: list[NeuronObservation], inputs, candidates: WeightCandidateSet = WeightCandidateSet(),
                   tau: float = DEFAULT_TAU, layer_sizes: Sequence[int] | None = None,
                   reference: Network | None = None, checkpoints: Sequence[int] | None = None,
                   top: int = 10, costs=None, level: tuple[float, float] | None = None) -> AttackReport:
    """Recover weights, biases and activations layer by layer from per-neuron observations.

    ``layer_sizes`` (widths of each layer, no input width) forces the grouping;
    otherwise boundaries come from correlation, falling back to fan-in structure.
    ``reference`` is only used to score the result (PGE, rho of the true value).
    ``level`` = (baseline, alpha) enables recovery of zero weights and dead inputs.
    """
    from ..leaksim.model import DEFAULT_COSTS
    costs = costs or DEFAULT_COSTS
    x = _check_inputs(inputs).reshape(len(inputs), -1)
    D = len(x)
    cps = list(checkpoints) if checkpoints is not None else [D]
    report = AttackReport(cps)
    cands = candidates.values
    fans = [ob.fan_in for ob in neurons]
    layers: list[Layer] = []
    start, li = 0, 0
    ref_layers = [l for l in reference.layers if l.kind is LayerKind.FC] if reference is not None else None
    while start < len(neurons):
        width_in = x.shape[1]
        rest = neurons[start:]
        # weight scans for every remaining neuron: needed anyway for boundary scores
        best = np.zeros((len(rest), width_in))
        per_neuron: dict[int, dict[int, tuple]] = {n: {} for n in range(len(rest))}
        if layer_sizes is not None:
            if li >= len(layer_sizes):
                report.errors.append({"kind": "segmentation", "message": "more neurons than layer sizes"})
                break
            limit = layer_sizes[li]
        else:
            limit = len(rest)
        for j in range(width_in):
            cols = [n for n in range(limit) if rest[n].fan_in > j]
            if not cols:
                break
            T = np.stack([rest[n].mac[:, j] for n in cols], axis=1)
            correct = None
            if ref_layers is not None and li < len(ref_layers) and ref_layers[li].dims[0] == width_in:
                rw = ref_layers[li].weights
                correct = [int(rw[n, j]) if n < rw.shape[0] else 0 for n in cols]
            res = correlation_scan(x[:, j], T, cands, checkpoints=cps, correct=correct, top=top, level=level)
            for c, n in enumerate(cols):
                best[n, j] = res.rho_max[-1, c]
                per_neuron[n][j] = (res, c)
        if layer_sizes is not None:
            size = layer_sizes[li]
            if size > len(rest):
                report.errors.append({"kind": "segmentation", "message": f"layer {li} needs {size} neurons"})
                break
        else:
            fan_clip = np.array([min(ob.fan_in, width_in) for ob in rest])
            scores = np.array([best[n, :fan_clip[n]].mean() for n in range(len(rest))])
            try:
                size = _boundary_from_scores(scores, tau)
            except BoundaryNotFound as exc:
                size = _structural_boundary(fans, start, width_in)
                if size is None:
                    report.errors.append({"kind": exc.kind, "message": str(exc)})
                    break
                size -= start
                report.flags.append(f"layer {li}: no neuron correlates above tau; boundary taken from fan-in structure")
        group = rest[:size]
        if any(ob.fan_in != width_in for ob in group):
            report.errors.append({"kind": "segmentation",
                                  "message": f"layer {li}: fan-in {sorted({o.fan_in for o in group})} != input width {width_in}"})
            break
        W = np.array([[per_neuron[n][j][0].top_values[per_neuron[n][j][1], 0] for j in range(width_in)]
                      for n in range(size)], dtype=np.int64)
        order: dict[tuple[int, int], list[int]] = {}
        for n in range(size):
            for j in range(width_in):
                res, c = per_neuron[n][j]
                tied = _tied(res.top_values[c], res.top_rho[c])
                if len(tied) > 1:
                    order[n, j] = _break_tie(x, W, n, j, tied, group[n].bias, cands, level)
                    W[n, j] = order[n, j][0]
        if order:
            report.flags.append(f"layer {li}: {len(order)} exact weight ties settled by bias correlation")
        for n in range(size):
            for j in range(width_in):
                res, c = per_neuron[n][j]
                ranked = [(int(v), float(r)) for v, r in zip(res.top_values[c], res.top_rho[c])]
                pg = None if res.pge is None else res.pge[:, c].tolist()
                if (n, j) in order:
                    rho = dict(ranked)
                    tied = order[n, j]
                    ranked = [(v, rho[v]) for v in tied] + ranked[len(tied):]
                    if pg is not None and int(ref_layers[li].weights[n, j]) in tied:
                        pg[-1] = tied.index(int(ref_layers[li].weights[n, j]))
                report.results.append(SecretResult(
                    li, n, j, ranked, res.rho_max[:, c].tolist(),
                    None if res.rho_correct is None else res.rho_correct[:, c].tolist(),
                    pg, None if res.pge is None else int(ref_layers[li].weights[n, j]),
                ))
        acc = _layer_acc(x, W)
        B = np.zeros(size, dtype=np.int64)
        for n in range(size):
            correct = None
            if ref_layers is not None and li < len(ref_layers) and ref_layers[li].dims == (width_in, size):
                correct = [int(ref_layers[li].biases[n])]
            res = correlation_scan(acc[:, n], group[n].bias[:, None], cands, hypothesis=sum_hypotheses,
                                   checkpoints=cps, correct=correct, top=top, level=level)
            B[n] = res.top_values[0, 0]
            report.results.append(SecretResult(
                li, n, -1, [(int(v), float(r)) for v, r in zip(res.top_values[0], res.top_rho[0])],
                res.rho_max[:, 0].tolist(),
                None if res.rho_correct is None else res.rho_correct[:, 0].tolist(),
                None if res.pge is None else res.pge[:, 0].tolist(),
                None if correct is None else correct[0],
            ))
        z = saturate16(wrap32(acc + B[None, :]))
        kinds = [_resolve_activation(group[n], z[:, n], costs) for n in range(size)]
        kind = max(set(kinds), key=kinds.count)
        if len(set(kinds)) > 1:
            report.flags.append(f"layer {li}: mixed activation estimates {sorted(k.value for k in set(kinds))}")
        layer = Layer(LayerKind.FC, (width_in, size), W.astype(np.int16), B.astype(np.int16), kind)
        layers.append(layer)
        report.layer_sizes.append(size)
        report.activations.append(kind.value)
        if kind is Activation.SOFTMAX:
            x = np.stack([activate(kind, row) for row in z])
        else:
            x = activate(kind, z)
        start += size
        li += 1
    if layers:
        report.network = Network((layers[0].dims[0],), layers, "recovered")
    w = report.weights
    if w and np.mean([r.ranked[0][1] ** 2 for r in w]) ** 0.5 < tau:
        report.flags.append("low correlation: weights likely not recovered")
    return report


def attack_network(traces, inputs, hints: ShapeHints | None = None,
                   candidates: WeightCandidateSet = WeightCandidateSet(), tau: float = DEFAULT_TAU,
                   reference: Network | None = None, checkpoints: Sequence[int] | None = None,
                   top: int = 10) -> AttackReport:
    """Full pipeline on Baseline or HWShuffle traces: segment, then recover layer by layer."""
    traces = list(traces)
    _reject_annotated(traces)
    hints = hints or ShapeHints.from_trace(traces[0])
    try:
        segments = segment_trace(mean_trace(traces), hints)
    except ShuflabError as exc:
        rep = AttackReport(list(checkpoints or [len(traces)]))
        rep.errors.append({"kind": exc.kind, "message": str(exc)})
        return rep
    neurons = observe(traces, segments)
    sizes = None if hints.layer_sizes is None else hints.layer_sizes[1:]
    return recover_layers(neurons, inputs, candidates, tau, sizes, reference, checkpoints, top, hints.costs,
                          (hints.baseline, hints.alpha))
