"""Locating MAC blocks, neurons and activation windows in a trace.

Detection is a masked matched filter: the firmware touches fixed constants at
fixed offsets, so windows whose known cycles match the expected leakage mark
loop iterations and activation calls. Works on single traces or on the mean
of a set of equal-length traces.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DetectionFailure, SegmentationError
from ..fxnet import Activation
from ..leaksim.model import ACT_ENTRY, ACT_EXIT, DEFAULT_COSTS, HW_LUT, CycleCostTable, LeakModel
from ..leaksim.program import check_mode
from ..leaksim.trace import PowerTrace


@dataclass(frozen=True)
class ShapeHints:
    """Public knowledge the attacker brings: firmware variant and leakage calibration."""

    mode: str = "baseline"
    alpha: float = 1.0
    baseline: float = 10.0
    costs: CycleCostTable = DEFAULT_COSTS
    tol: float = 1.0            # max mean squared error per known cycle, in alpha^2 units
    layer_sizes: tuple[int, ...] | None = None   # optional FC widths (input first)
    rng_bits: int = 14

    @classmethod
    def from_trace(cls, trace: PowerTrace, **overrides) -> "ShapeHints":
        m = trace.meta
        kw = dict(mode=m.get("mode", "baseline"), alpha=m.get("alpha", 1.0),
                  baseline=m.get("baseline", 10.0), rng_bits=m.get("rng_bits", 14))
        kw.update(overrides)
        return cls(**kw)

    @property
    def model(self) -> LeakModel:
        return LeakModel(self.alpha, 0.0, self.baseline)


@dataclass
class NeuronSegment:
    entry: int                 # first cycle of the activation-entry marker
    exit: int                  # first cycle of the activation-exit marker
    block_starts: np.ndarray   # first cycle of each MAC block, execution order
    mac_points: np.ndarray     # product-leak cycle of each MAC block
    bias_point: int
    out_point: int
    act_latency: int
    index_points: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def fan_in(self) -> int:
        return len(self.mac_points)


def _samples(trace) -> np.ndarray:
    if isinstance(trace, PowerTrace):
        return trace.samples.astype(np.float64)
    return np.asarray(trace, dtype=np.float64)


def masked_mse(samples: np.ndarray, words, known, hints: ShapeHints) -> np.ndarray:
    """Mean squared error (in HW units) between each window and the pattern's known cycles."""
    s = (samples - hints.baseline) / hints.alpha
    e = HW_LUT[np.asarray(words, dtype=np.int64) & 0xFFFF].astype(np.float64)
    m = np.asarray(known, dtype=np.float64)
    n = len(e)
    if len(s) < n:
        return np.zeros(0)
    sse = (np.correlate(s * s, m, "valid") - 2 * np.correlate(s, m * e, "valid") + (m * e * e).sum())
    return np.maximum(sse, 0) / m.sum()


def find_pattern(samples: np.ndarray, words, known, hints: ShapeHints) -> np.ndarray:
    """Start positions where the pattern matches within tolerance (non-overlapping, best-first)."""
    mse = masked_mse(samples, words, known, hints)
    hits = np.flatnonzero(mse <= hints.tol)
    if len(hits) == 0:
        return hits
    n = len(words)
    keep = []
    last = -n
    for h in hits:  # hits are sorted; resolve overlapping runs by lowest error
        if h - last >= n:
            keep.append(h)
            last = h
        elif mse[h] < mse[keep[-1]]:
            keep[-1] = h
            last = h
    return np.asarray(keep, dtype=np.int64)


def find_markers(samples, hints: ShapeHints) -> tuple[np.ndarray, np.ndarray]:
    s = _samples(samples)
    ones = np.ones(len(ACT_ENTRY), dtype=bool)
    return find_pattern(s, ACT_ENTRY, ones, hints), find_pattern(s, ACT_EXIT, ones, hints)


def find_mac_blocks(samples, hints: ShapeHints, mode: str | None = None) -> np.ndarray:
    mode = check_mode(mode or hints.mode)
    words, known = hints.costs.mac_template(mode)
    return find_pattern(_samples(samples), words, known, hints)


def count_neurons(trace, hints: ShapeHints | None = None) -> int:
    """Number of activation calls, i.e. neurons computed in the trace."""
    hints = hints or (ShapeHints.from_trace(trace) if isinstance(trace, PowerTrace) else ShapeHints())
    entries, exits = find_markers(trace, hints)
    if len(entries) == 0 or len(entries) != len(exits):
        raise DetectionFailure(f"no consistent neuron structure ({len(entries)} entries, {len(exits)} exits)")
    return len(entries)


def segment_trace(trace, hints: ShapeHints | None = None) -> list[NeuronSegment]:
    """Per-neuron MAC blocks and leak points for a Baseline or HWShuffle trace."""
    hints = hints or (ShapeHints.from_trace(trace) if isinstance(trace, PowerTrace) else ShapeHints())
    mode = check_mode(hints.mode)
    if mode == "swshuffle":
        raise SegmentationError("software-shuffled traces are parsed by the swap-recovery attack")
    s = _samples(trace)
    c = hints.costs
    entries, exits = find_markers(s, hints)
    if len(entries) == 0:
        raise SegmentationError("no activation markers found")
    if len(entries) != len(exits) or np.any(exits <= entries):
        raise SegmentationError("activation entry/exit markers do not pair up")
    blocks = find_mac_blocks(s, hints, mode)
    offs = c.mac_offsets(mode)
    block_len = c.mac_block(mode)
    out = []
    prev_end = 0
    for e, x in zip(entries, exits):
        mine = blocks[(blocks >= prev_end) & (blocks + block_len <= e)]
        if len(mine) == 0:
            raise SegmentationError(f"neuron at cycle {e} has no MAC blocks")
        out.append(NeuronSegment(
            entry=int(e), exit=int(x), block_starts=mine,
            mac_points=mine + offs["product"],
            bias_point=int(e - c.bias_saturate - 1),
            out_point=int(x + len(ACT_EXIT)),
            act_latency=int(x - e - len(ACT_ENTRY)),
            index_points=mine + offs["index"],
        ))
        prev_end = x + len(ACT_EXIT)
    return out


def mean_trace(traces) -> np.ndarray:
    lengths = {len(t) for t in traces}
    if len(lengths) != 1:
        raise SegmentationError(f"inconsistent trace lengths {sorted(lengths)[:5]}")
    return np.mean([_samples(t) for t in traces], axis=0)


# activation latency bands, derived from the cost table's ranges
def classify_activation(latency: int, costs: CycleCostTable = DEFAULT_COSTS) -> frozenset[Activation]:
    """Activation kinds whose latency range contains ``latency`` (several when ranges overlap)."""
    hits = frozenset(k for k, (lo, hi) in costs.act_cycles.items() if lo <= latency <= hi)
    if hits:
        return hits
    # outside every range: nearest band
    dist = {k: min(abs(latency - lo), abs(latency - hi)) for k, (lo, hi) in costs.act_cycles.items()}
    best = min(dist.values())
    return frozenset(k for k, d in dist.items() if d == best)
