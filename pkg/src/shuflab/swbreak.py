"""Breaking software (Fisher-Yates) shuffling from single traces.

Every Fisher-Yates step computes ``j = rand() % (i+1)`` with a software
division whose latency and per-cycle leakage depend on the dividend. With a
library of division templates keyed by (divisor, latency), each step's
dividend, and hence j, is read off one trace. Replaying the swaps gives the
permutation used in that run, which is undone before running CPA.

Under a pure Hamming-weight model a few dividends share identical division
templates. Those ties are resolved with the leakage of the swap that follows
(indices and list values) and, at the end of each loop, with the per-slot index
loads; candidates are tracked with a small beam.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cpa.attack import (AttackReport, NeuronObservation, WeightCandidateSet, _reject_annotated,
                         recover_layers)
from .cpa.segment import ShapeHints, masked_mse
from .errors import DetectionFailure, FormatError, LibraryMismatch, ModeMismatch, ShuflabError
from .fxnet import Activation, Network
from .leaksim.division import division_leak_matrix
from .leaksim.model import ACT_ENTRY, ACT_EXIT, DEFAULT_COSTS, DIV_LANDMARK, HW_LUT, CycleCostTable
from .leaksim.trace import PowerTrace

LIB_MAGIC = b"SHDL"
LIB_VERSION = 1
CACHE_ENV = "SHUFLAB_CACHE_DIR"


class TraceUnusable(DetectionFailure):
    kind = "trace-unusable"


# -- template library ---------------------------------------------------------

@dataclass
class TemplateClass:
    a: np.ndarray            # (C,) dividends
    hw: np.ndarray           # (C, t) expected Hamming weights per cycle
    _cols: np.ndarray | None = None
    _f: np.ndarray | None = None
    _norm: np.ndarray | None = None
    _const: np.ndarray | None = None

    def _prepare(self) -> None:
        # cycles identical across the class add the same distance to every candidate
        varying = np.any(self.hw != self.hw[:1], axis=0)
        self._cols = np.flatnonzero(varying)
        self._const = np.flatnonzero(~varying)
        self._f = np.ascontiguousarray(self.hw[:, self._cols], dtype=np.float32)
        self._norm = (self._f.astype(np.float64) ** 2).sum(axis=1)

    def sse(self, obs: np.ndarray) -> np.ndarray:
        """Squared distance of each template to an observation (both in HW units)."""
        if self._f is None:
            self._prepare()
        o = obs[self._cols]
        fixed = float(((obs[self._const] - self.hw[0, self._const]) ** 2).sum())
        cross = self._f @ o.astype(np.float32)
        return np.maximum(self._norm - 2 * cross.astype(np.float64) + o @ o, 0) + fixed


@dataclass
class DivisionTemplateLibrary:
    bits: int
    N: int
    classes: dict[tuple[int, int], TemplateClass] = field(default_factory=dict)
    costs: CycleCostTable = DEFAULT_COSTS

    @property
    def t_min(self) -> int:
        return min(t for _, t in self.classes)

    @property
    def t_max(self) -> int:
        return max(t for _, t in self.classes)

    def latencies(self, b: int) -> list[int]:
        ts = sorted(t for bb, t in self.classes if bb == b)
        if not ts:
            raise LibraryMismatch(f"divisor {b} not in library (N={self.N})")
        return ts

    def get(self, b: int, t: int) -> TemplateClass:
        try:
            return self.classes[(b, t)]
        except KeyError:
            raise LibraryMismatch(f"no templates for divisor {b} at latency {t}") from None

    def __len__(self) -> int:
        return sum(len(c.a) for c in self.classes.values())

    def fingerprint(self) -> str:
        return library_fingerprint(self.bits, self.N, self.costs)


def library_fingerprint(bits: int, N: int, costs: CycleCostTable = DEFAULT_COSTS) -> str:
    c = costs
    key = (LIB_VERSION, bits, N, c.div_prologue, c.div_norm_step, c.div_norm_exit, c.div_step, c.div_epilogue)
    return hashlib.sha256(repr(key).encode()).hexdigest()[:16]


def build_division_templates(bits: int, N: int, model=None, costs: CycleCostTable = DEFAULT_COSTS) -> DivisionTemplateLibrary:
    """Templates for every dividend a < 2**bits and divisor b in [1, N+1].

    Templates are stored in Hamming-weight units, so one library serves any
    leakage calibration; ``model`` is accepted for interface symmetry.
    """
    if not 1 <= bits <= 16:
        raise FormatError("rng bit width must be in [1, 16]")
    lib = DivisionTemplateLibrary(bits, N, costs=costs)
    a_all = np.arange(1 << bits, dtype=np.int64)
    a_len = np.frexp(a_all.astype(np.float64))[1]
    for b in range(1, N + 2):
        s_all = np.maximum(0, a_len - b.bit_length())
        for s in np.unique(s_all):
            a = a_all[s_all == s]
            words = division_leak_matrix(a, b, int(s), costs)
            lib.classes[(b, costs.div_latency(int(s)))] = TemplateClass(a, HW_LUT[words])
    return lib


def save_library(lib: DivisionTemplateLibrary, path: str | Path) -> Path:
    """Versioned header, then per class a (b, t, count) header and packed (b, t, a, template) records."""
    path = Path(path)
    fp = lib.fingerprint().encode()
    chunks = [LIB_MAGIC, struct.pack("<HHII", LIB_VERSION, lib.bits, lib.N, len(lib.classes)), fp]
    for (b, t), cls in sorted(lib.classes.items()):
        rec = np.zeros(len(cls.a), dtype=[("b", "<u2"), ("t", "<u2"), ("a", "<u4"), ("tpl", "u1", (t,))])
        rec["b"], rec["t"], rec["a"], rec["tpl"] = b, t, cls.a, cls.hw
        chunks += [struct.pack("<HHI", b, t, len(cls.a)), rec.tobytes()]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_library(path: str | Path, costs: CycleCostTable = DEFAULT_COSTS) -> DivisionTemplateLibrary:
    raw = Path(path).read_bytes()
    if raw[:4] != LIB_MAGIC:
        raise FormatError(f"{path}: not a division template library")
    version, bits, N, nclass = struct.unpack_from("<HHII", raw, 4)
    if version != LIB_VERSION:
        raise FormatError(f"{path}: unsupported library version {version}")
    off = 4 + 12
    fp = raw[off:off + 16].decode()
    off += 16
    lib = DivisionTemplateLibrary(bits, N, costs=costs)
    if fp != lib.fingerprint():
        raise FormatError(f"{path}: library was built with a different division cost model")
    for _ in range(nclass):
        b, t, count = struct.unpack_from("<HHI", raw, off)
        off += 8
        dt = np.dtype([("b", "<u2"), ("t", "<u2"), ("a", "<u4"), ("tpl", "u1", (t,))])
        rec = np.frombuffer(raw, dt, count, off)
        off += dt.itemsize * count
        lib.classes[(b, t)] = TemplateClass(rec["a"].astype(np.int64), np.ascontiguousarray(rec["tpl"]))
    return lib


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "shuflab"))


def cached_library(bits: int, N: int, costs: CycleCostTable = DEFAULT_COSTS,
                   cache_dir: str | Path | None = None) -> DivisionTemplateLibrary:
    """Load the library for (bits, N) from the cache, building and storing it on a miss."""
    d = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = d / f"divlib-{library_fingerprint(bits, N, costs)}.bin"
    if path.exists():
        try:
            return load_library(path, costs)
        except FormatError:
            pass
    lib = build_division_templates(bits, N, costs=costs)
    d.mkdir(parents=True, exist_ok=True)
    save_library(lib, path)
    return lib


# -- per-division recovery -------------------------------------------------------

def _hw_units(samples, hints: ShapeHints) -> np.ndarray:
    return (np.asarray(samples, dtype=np.float64) - hints.baseline) / hints.alpha


def find_tdiv(samples, start: int, library: DivisionTemplateLibrary, b: int,
              hints: ShapeHints = ShapeHints()) -> int:
    """Latency of the division starting at ``start``: where the post-division landmark begins."""
    s = np.asarray(samples, dtype=np.float64)
    lm = np.asarray(DIV_LANDMARK)
    known = np.ones(len(lm), dtype=bool)
    best_t, best = None, np.inf
    for t in library.latencies(b):
        lo = start + t
        if lo + len(lm) > len(s):
            break
        err = masked_mse(s[lo:lo + len(lm)], lm, known, hints)[0]
        if err < best:
            best_t, best = t, err
    if best_t is None or best > hints.tol:
        raise DetectionFailure(f"no division landmark after cycle {start} (best error {best:.3g})")
    return best_t


def dividend_scores(segment, b: int, t_div: int, library: DivisionTemplateLibrary,
                    hints: ShapeHints = ShapeHints()) -> tuple[np.ndarray, np.ndarray]:
    cls = library.get(b, t_div)
    obs = _hw_units(segment, hints)
    if len(obs) != t_div:
        raise LibraryMismatch(f"segment has {len(obs)} cycles, latency class has {t_div}")
    return cls.a, cls.sse(obs)


def recover_dividend(segment, b: int, t_div: int, library: DivisionTemplateLibrary,
                     hints: ShapeHints = ShapeHints()) -> int:
    """Dividend whose template is nearest the observed division window."""
    cls = library.get(b, t_div)
    if len(cls.a) == 1:
        return int(cls.a[0])
    a, sse = dividend_scores(segment, b, t_div, library, hints)
    return int(a[np.argmin(sse)])


# -- swap sequences ------------------------------------------------------------

@dataclass
class SwapHypothesis:
    score: float
    items: list[int]
    pairs: list[tuple[int, int]]


@dataclass
class SwapRecovery:
    pairs: list[tuple[int, int]]
    permutation: list[int]
    end: int
    hypotheses: list[SwapHypothesis] = field(default_factory=list)

    @property
    def ambiguous(self) -> bool:
        return len(self.hypotheses) > 1 and self.hypotheses[1].score - self.hypotheses[0].score < 1e-6

    def select(self, extra_scores: Sequence[float]) -> "SwapRecovery":
        """Re-rank hypotheses after adding downstream evidence, one score per hypothesis."""
        order = np.argsort([h.score + e for h, e in zip(self.hypotheses, extra_scores)], kind="stable")
        hyps = [self.hypotheses[i] for i in order]
        return SwapRecovery(hyps[0].pairs, hyps[0].items, self.end, hyps)


def _swap_words(items: list[int], i: int, j: int) -> tuple[int, ...]:
    return (4 * j, items[j], 0, 4 * i, items[i], 0, items[j], 0, items[i], 0)


def recover_swap_sequence(samples, n: int, start: int = 0, library: DivisionTemplateLibrary | None = None,
                          hints: ShapeHints = ShapeHints(), beam: int = 8, branch: int = 4,
                          margin: float = 12.0) -> SwapRecovery:
    """Recover the swaps of one Fisher-Yates run whose entry begins at ``start``.

    The list creation is assumed to precede ``start``. Returns the best
    hypothesis plus the runners-up (within ``margin`` squared-HW units) so
    callers can add later evidence.
    """
    s = np.asarray(samples.samples if isinstance(samples, PowerTrace) else samples, dtype=np.float64)
    c = hints.costs
    if library is None:
        library = cached_library(hints.rng_bits, max(n, 1), c)
    pos = start + c.fy_entry
    hyps = [SwapHypothesis(0.0, list(range(n)), [])]
    for i in range(n - 1, 0, -1):
        b = i + 1
        div_start = pos + c.fy_div_offset
        try:
            t = find_tdiv(s, div_start, library, b, hints)
        except ShuflabError as exc:
            raise TraceUnusable(f"step i={i}: {exc}") from exc
        a, sse = dividend_scores(s[div_start:div_start + t], b, t, library, hints)
        rand_obs = _hw_units(s[pos + c.fy_head], hints)
        sse = sse + (HW_LUT[a & 0xFFFF] - rand_obs) ** 2
        js = a % b
        per_j = np.full(b, np.inf)
        np.minimum.at(per_j, js, sse)
        order = np.argsort(per_j, kind="stable")
        floor = per_j[order[0]]
        keep = [int(j) for j in order[:branch] if per_j[j] <= floor + margin]
        swap_at = div_start + t + len(DIV_LANDMARK)
        obs = _hw_units(s[swap_at:swap_at + c.fy_swap], hints)
        if len(obs) < c.fy_swap:
            raise TraceUnusable(f"trace ends inside step i={i}")
        nxt = []
        for h in hyps:
            for j in keep:
                exp = HW_LUT[np.array(_swap_words(h.items, i, j))]
                score = h.score + per_j[j] + float(((obs - exp) ** 2).sum())
                nxt.append((score, h, j))
        nxt.sort(key=lambda e: e[0])
        best = nxt[0][0]
        hyps = []
        for score, h, j in nxt[:beam]:
            if score > best + margin:
                break
            items = h.items.copy()
            items[i], items[j] = items[j], items[i]
            hyps.append(SwapHypothesis(score, items, h.pairs + [(i, j)]))
        pos = swap_at + c.fy_swap
    end = pos + c.fy_exit
    return SwapRecovery(hyps[0].pairs, hyps[0].items, end, hyps)


def replay_swaps(n: int, pairs: Sequence[tuple[int, int]]) -> list[int]:
    items = list(range(n))
    for i, j in pairs:
        items[i], items[j] = items[j], items[i]
    return items


# -- whole-trace parsing ----------------------------------------------------------

@dataclass
class ParsedNeuron:
    neuron: int
    mac_points: np.ndarray        # cycle of the product leak, indexed by canonical weight
    bias_point: int
    out_point: int
    act_latency: int


@dataclass
class ParsedLayer:
    neuron_order: list[int]
    weight_orders: list[list[int]]
    neurons: list[ParsedNeuron]


def _feasible_latencies(costs: CycleCostTable) -> np.ndarray:
    return np.unique(np.concatenate([np.arange(lo, hi + 1) for lo, hi in costs.act_cycles.values()]))


def _find_act_exit(s, entry: int, hints: ShapeHints) -> int:
    lats = _feasible_latencies(hints.costs)
    base = entry + len(ACT_ENTRY)
    lats = lats[base + lats + len(ACT_EXIT) <= len(s)]
    if len(lats) == 0:
        raise TraceUnusable("trace ends inside an activation")
    window = s[base + lats[0]: base + lats[-1] + len(ACT_EXIT)]
    mse = masked_mse(window, ACT_EXIT, np.ones(len(ACT_EXIT), bool), hints)
    errs = mse[lats - lats[0]]
    k = int(np.argmin(errs))
    if errs[k] > hints.tol:
        raise TraceUnusable(f"no activation exit after cycle {entry}")
    return int(lats[k])


def _index_penalty(s, points, perm, hints) -> float:
    obs = _hw_units(s[points], hints)
    return float(((obs - HW_LUT[np.asarray(perm)]) ** 2).sum())


def parse_sw_trace(trace, layer_sizes: Sequence[int], hints: ShapeHints,
                   libraries: dict[int, DivisionTemplateLibrary] | None = None) -> list[ParsedLayer]:
    """Walk a software-shuffled FC trace and undo both shuffles in every layer."""
    s = np.asarray(trace.samples if isinstance(trace, PowerTrace) else trace, dtype=np.float64)
    c = hints.costs
    libs = libraries if libraries is not None else {}

    def lib(n):
        if n not in libs:
            libs[n] = cached_library(hints.rng_bits, n, c)
        return libs[n]

    block = c.mac_block("swshuffle")
    offs = c.mac_offsets("swshuffle")
    ones = np.ones(len(ACT_ENTRY), bool)
    pos = 0
    layers = []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        pos += c.layer_prologue + c.create_list(n_out)
        outer = recover_swap_sequence(s, n_out, pos, lib(n_out), hints)
        pos = outer.end
        slots = []
        r_points = []
        for slot in range(n_out):
            pos += c.neuron_prologue
            r_points.append(pos)
            pos += c.load + c.create_list(n_in)
            inner = recover_swap_sequence(s, n_in, pos, lib(n_in), hints)
            pos = inner.end
            starts = pos + block * np.arange(n_in)
            idx_points = starts + offs["index"]
            inner = inner.select([_index_penalty(s, idx_points, h.items, hints) for h in inner.hypotheses])
            pos += block * n_in
            bias_point = pos + c.load
            entry = bias_point + 1 + c.bias_saturate
            if masked_mse(s[entry:entry + len(ACT_ENTRY)], ACT_ENTRY, ones, hints)[0] > hints.tol:
                raise TraceUnusable(f"layer structure lost before cycle {entry}")
            lat = _find_act_exit(s, entry, hints)
            exit_ = entry + len(ACT_ENTRY) + lat
            out_point = exit_ + len(ACT_EXIT)
            pos = out_point + c.load
            mac = np.empty(n_in, dtype=np.int64)
            mac[np.asarray(inner.permutation)] = starts + offs["product"]
            slots.append((inner.permutation, ParsedNeuron(-1, mac, bias_point, out_point, lat)))
        outer = outer.select([_index_penalty(s, np.asarray(r_points), h.items, hints) for h in outer.hypotheses])
        lats = [p.act_latency for _, p in slots]
        lo, hi = c.act_range(Activation.SOFTMAX)
        if all(lo <= L <= hi for L in lats):
            pos += n_out * (c.softmax_norm + c.load)
        neurons = [None] * n_out
        orders = [None] * n_out
        for slot, (perm, p) in enumerate(slots):
            i = outer.permutation[slot]
            p.neuron = i
            neurons[i] = p
            orders[i] = perm
        layers.append(ParsedLayer(outer.permutation, orders, neurons))
    return layers


def attack_sw_shuffled(traces, inputs, hints: ShapeHints, candidates: WeightCandidateSet = WeightCandidateSet(),
                       reference: Network | None = None, checkpoints: Sequence[int] | None = None,
                       top: int = 10, libraries: dict | None = None) -> AttackReport:
    """Unshuffle every trace, then run the layer-by-layer CPA on canonical-order samples.

    ``hints.layer_sizes`` (input width first) must be given: software shuffling
    leaves loop lengths visible, and the parser walks the loops with them.
    """
    traces = list(traces)
    _reject_annotated(traces)
    if hints.layer_sizes is None:
        raise ModeMismatch("software-shuffle parsing needs layer sizes")
    if any(t.meta.get("mode", "swshuffle") != "swshuffle" for t in traces if isinstance(t, PowerTrace)):
        raise ModeMismatch("swap recovery applies to software-shuffled traces only")
    inputs = np.asarray(inputs)
    libraries = {} if libraries is None else libraries
    parsed, used, failures = [], [], []
    for d, t in enumerate(traces):
        try:
            parsed.append(parse_sw_trace(t, hints.layer_sizes, hints, libraries))
            used.append(d)
        except ShuflabError as exc:
            failures.append({"trace": d, "kind": exc.kind, "message": str(exc)})
    if len(used) < 2:
        rep = AttackReport(list(checkpoints or [len(used)]))
        rep.errors.append({"kind": "trace-unusable", "message": f"only {len(used)} usable traces"})
        rep.errors += failures[:10]
        return rep
    S = [np.asarray(traces[d].samples if isinstance(traces[d], PowerTrace) else traces[d], dtype=np.float64)
         for d in used]
    neurons = []
    for li in range(len(hints.layer_sizes) - 1):
        for n in range(hints.layer_sizes[li + 1]):
            ps = [parsed[k][li].neurons[n] for k in range(len(used))]
            lat = int(np.bincount([p.act_latency for p in ps]).argmax())
            neurons.append(NeuronObservation(
                np.stack([S[k][p.mac_points] for k, p in enumerate(ps)]),
                np.array([S[k][p.bias_point] for k, p in enumerate(ps)]),
                np.array([S[k][p.out_point] for k, p in enumerate(ps)]),
                lat,
            ))
    if checkpoints is not None:
        checkpoints = [min(cp, len(used)) for cp in checkpoints]
        checkpoints = sorted(set(checkpoints))
    rep = recover_layers(neurons, inputs[used], candidates, layer_sizes=hints.layer_sizes[1:],
                         reference=reference, checkpoints=checkpoints, top=top, costs=hints.costs,
                         level=(hints.baseline, hints.alpha))
    if failures:
        rep.flags.append(f"{len(failures)} of {len(traces)} traces unusable")
    return rep
