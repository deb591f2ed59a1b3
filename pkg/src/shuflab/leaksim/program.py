"""Cycle-level execution of network inference with per-cycle leakage.

The executor walks the same loops as the fixed-point reference, emitting one
16-bit word per cycle (0 on quiet cycles). Samples are then
``baseline + alpha * HW(word) + noise``.
"""
from __future__ import annotations

import numpy as np

from .. import shufcore
from ..entropy import EntropySource, PhiloxSource
from ..errors import ConfigurationError
from ..fxnet import (Activation, LayerKind, Network, activate, mul_raw, saturate16, wrap32)
from .division import log_words, software_divide
from .model import (ACT_ENTRY, ACT_EXIT, DEFAULT_COSTS, DIV_LANDMARK, HW_LUT, SAT_CONSTS,
                    CycleCostTable, LeakModel)
from .trace import PowerTrace

MODES = ("baseline", "swshuffle", "hwshuffle")
DEFAULT_RNG_BITS = 14


def check_mode(mode: str) -> str:
    m = mode.lower()
    if m not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    return m


class Emitter:
    """Collects leaked words (or just counts cycles) and optional annotations."""

    def __init__(self, record: bool = True, annotate: bool = False):
        self.words: list[int] | None = [] if record else None
        self.count = 0
        self.notes: list[dict] | None = [] if annotate else None

    def quiet(self, n: int) -> None:
        if n <= 0:
            return
        self.count += n
        if self.words is not None:
            self.words.extend([0] * n)

    def leak(self, word: int) -> None:
        self.count += 1
        if self.words is not None:
            self.words.append(word & 0xFFFF)

    def extend(self, words) -> None:
        self.count += len(words)
        if self.words is not None:
            self.words.extend(w & 0xFFFF for w in words)

    def load(self, word: int, cycles: int = 2) -> None:
        """Bus transfer: the first cycle carries the operand."""
        self.leak(word)
        self.quiet(cycles - 1)

    def note(self, kind: str, offset: int = 0, **info) -> None:
        if self.notes is not None:
            self.notes.append({"cycle": self.count + offset, "kind": kind, **info})


def create_list(n: int, sink: Emitter | None = None) -> list[int]:
    if sink is not None:
        sink.note("create_list", n=n)
        for v in range(n):
            sink.leak(v)
            sink.quiet(1)
    return list(range(n))


def fisher_yates(n: int, rng: EntropySource, trace_sink=None, bits: int = DEFAULT_RNG_BITS,
                 costs: CycleCostTable = DEFAULT_COSTS) -> list[int]:
    """Shuffle ``range(n)`` with ``j = rand() % (i+1)``, i descending, modulus by software division.

    ``trace_sink`` may be an Emitter (full instruction-level emission) or a
    plain list, which then receives each division's cycle log.
    """
    if n < 1:
        raise ConfigurationError("fisher_yates needs n >= 1")
    items = list(range(n))
    em = trace_sink if isinstance(trace_sink, Emitter) else None
    if em is not None:
        em.note("fy", n=n)
        em.quiet(costs.fy_entry)
    for i in range(n - 1, 0, -1):
        a = rng.bits(bits)
        _, j, log = software_divide(a, i + 1, costs)
        if em is not None:
            em.quiet(costs.fy_head)
            em.load(a, costs.load)
            em.leak(i + 1)
            em.quiet(costs.fy_call)
            em.note("div", a=a, b=i + 1, i=i, j=j, t_div=len(log))
            em.extend(log_words(log))
            em.note("landmark")
            em.extend(DIV_LANDMARK)
            em.note("swap", i=i, j=j)
            em.leak(4 * j)
            em.load(items[j], costs.load)
            em.leak(4 * i)
            em.load(items[i], costs.load)
            em.load(items[j], costs.load)
            em.load(items[i], costs.load)
        elif trace_sink is not None:
            trace_sink.append(log)
        items[i], items[j] = items[j], items[i]
    if em is not None:
        em.quiet(costs.fy_exit)
    return items


class Executor:
    def __init__(self, mode: str, entropy: EntropySource, k: int = shufcore.DEFAULT_BINS,
                 bits: int = DEFAULT_RNG_BITS, costs: CycleCostTable = DEFAULT_COSTS,
                 record: bool = True, annotate: bool = False):
        self.mode = check_mode(mode)
        self.entropy = entropy
        self.bits = bits
        self.c = costs
        self.em = Emitter(record, annotate)
        self.unit = shufcore.ShufflerUnit(entropy, k=k) if self.mode == "hwshuffle" else None
        self._clock = 0

    # -- index sources ---------------------------------------------------------
    def load_bank(self, bank_id: int, n: int) -> None:
        k = self.unit.k
        self.em.note("load_bank", bank=bank_id, n=n)
        self.em.quiet(self.c.shfl_ld * 2 * k)
        self._sync()
        shufcore.load_bank(self.unit, bank_id, n, auto_reload=True)

    def _sync(self) -> None:
        self.unit.elapse(self.em.count - self._clock)
        self._clock = self.em.count

    def gni(self, bank_id: int) -> int:
        self._sync()
        value, stall = self.unit.bank(bank_id).read()
        self.em.quiet(stall)
        self.em.note("gni", bank=bank_id, value=value, stall=stall)
        self.em.quiet(self.c.gni)
        self._clock = self.em.count
        return value

    def shuffled_list(self, n: int) -> list[int]:
        create_list(n, self.em)
        return fisher_yates(n, self.entropy, self.em, self.bits, self.c)

    def fetch_index(self, bank_id: int, pos: int, order: list[int] | None) -> int:
        if self.mode == "baseline":
            return pos
        if self.mode == "hwshuffle":
            return self.gni(bank_id)
        idx = order[pos]
        self.em.note("list_load", bank=bank_id, operand=idx)
        self.em.load(idx, self.c.load)
        return idx

    def loop(self, bank_id: int, n: int):
        """Shuffled outer loop: per-iteration branch plus index fetch."""
        order = self.shuffled_list(n) if self.mode == "swshuffle" else None
        for pos in range(n):
            self.em.quiet(self.c.branch)
            yield self.fetch_index(bank_id, pos, order)

    # -- building blocks -----------------------------------------------------------
    def mac(self, x: int, w: int, mode: str, bank_id: int, pos: int, order, info: dict | None) -> tuple[int, int]:
        em, c = self.em, self.c
        em.quiet(c.branch)
        j = self.fetch_index(bank_id, pos, order) if mode != "baseline" else pos
        em.quiet(c.addr)
        if info is not None:
            xv, wv = info["x"][j], info["w"][j]
        else:
            xv, wv = x, w
        if em.notes is not None:
            em.note("load", operand=xv, what="input")
            em.note("load", offset=c.load, operand=wv, what="weight")
            em.note("mac", offset=2 * c.load, x=xv, w=wv, word=(xv * wv) & 0xFFFF,
                    index=j, slot=pos, **(info["where"] if info else {}))
        em.load(xv, c.load)
        em.load(wv, c.load)
        em.leak(xv * wv)
        em.quiet(c.mul_round)
        em.extend(SAT_CONSTS)
        em.quiet(c.saturate + c.call + c.accumulate + c.index)
        return j, mul_raw(xv, wv)

    def epilogue(self, acc: int, bias: int, kind: Activation, layer: int, slot: int, neuron: int) -> int:
        em, c = self.em, self.c
        em.note("load", operand=bias, what="bias")
        em.load(bias, c.load)
        total = wrap32(acc + bias)
        em.note("bias_add", word=total & 0xFFFF, layer=layer, neuron=neuron)
        em.leak(total)
        z = saturate16(total)
        em.quiet(c.bias_saturate)
        em.note("act_entry", layer=layer, neuron=neuron, slot=slot)
        em.extend(ACT_ENTRY)
        lat = c.act_latency(kind, layer, slot)
        em.note("act", latency=lat, activation=kind.value, layer=layer, neuron=neuron)
        em.quiet(lat)
        em.extend(ACT_EXIT)
        out = z if kind is Activation.SOFTMAX else int(activate(kind, [z])[0])
        em.note("store", operand=out, layer=layer, neuron=neuron)
        em.load(out, c.load)
        return z

    # -- layers ----------------------------------------------------------------
    def fc(self, li: int, layer, x: np.ndarray) -> np.ndarray:
        em, c, mode = self.em, self.c, self.mode
        n_in, n_out = layer.dims
        W = layer.weights.tolist()
        B = layer.biases.tolist()
        xs = [int(v) for v in x]
        em.note("layer", layer=li, layer_kind="FC", n_in=n_in, n_out=n_out)
        em.quiet(c.layer_prologue)
        outer = None
        if mode == "swshuffle":
            outer = self.shuffled_list(n_out)
        elif mode == "hwshuffle":
            self.load_bank(0, n_out)
            self.load_bank(1, n_in)
        z = np.zeros(n_out, dtype=np.int64)
        for slot in range(n_out):
            start = em.count
            em.quiet(c.neuron_prologue)
            i = self.fetch_index(0, slot, outer)
            if em.notes is not None:
                em.notes.append({"cycle": start, "kind": "neuron", "layer": li, "slot": slot, "neuron": i})
            inner = self.shuffled_list(n_in) if mode == "swshuffle" else None
            info = {"x": xs, "w": W[i], "where": {"layer": li, "neuron": i}}
            acc = 0
            for pos in range(n_in):
                _, p = self.mac(0, 0, mode, 1, pos, inner, info)
                acc = wrap32(acc + p)
            z[i] = self.epilogue(acc, B[i], layer.activation, li, slot, i)
        y = activate(layer.activation, z)
        if layer.activation is Activation.SOFTMAX:
            for i in range(n_out):
                em.quiet(c.softmax_norm)
                em.note("store", operand=int(y[i]), layer=li, neuron=i, what="softmax")
                em.load(int(y[i]), c.load)
        return y

    def conv(self, li: int, layer, x: np.ndarray) -> np.ndarray:
        em, c = self.em, self.c
        kw, kh, cin, cout = layer.dims
        ho, wo, _ = layer.output_shape(x.shape)
        W = layer.weights
        B = layer.biases.tolist()
        em.note("layer", layer=li, layer_kind="Conv2D")
        em.quiet(c.layer_prologue)
        if self.mode == "hwshuffle":
            for bank_id, n in enumerate((cout, ho, wo, cin)):
                self.load_bank(bank_id, n)
        z = np.zeros((ho, wo, cout), dtype=np.int64)
        slot = 0
        for co in self.loop(0, cout):
            for r in self.loop(1, ho):
                for q in self.loop(2, wo):
                    em.quiet(c.neuron_prologue)
                    acc = 0
                    for ci in self.loop(3, cin):
                        for kr in range(kh):
                            for kc in range(kw):
                                _, p = self.mac(int(x[r + kr, q + kc, ci]), int(W[co, ci, kr, kc]),
                                                "baseline", 3, kr * kw + kc, None, None)
                                acc = wrap32(acc + p)
                    z[r, q, co] = self.epilogue(acc, B[co], layer.activation, li, slot, co)
                    slot += 1
        return activate(layer.activation, z)

    def pool(self, li: int, x: np.ndarray) -> np.ndarray:
        em, c = self.em, self.c
        h, w, ch = x.shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"MaxPool needs even spatial dims, got {h}x{w}")
        ho, wo = h // 2, w // 2
        em.note("layer", layer=li, layer_kind="MaxPool")
        em.quiet(c.layer_prologue)
        if self.mode == "hwshuffle":
            for bank_id, n in enumerate((ch, ho, wo)):
                self.load_bank(bank_id, n)
        out = np.zeros((ho, wo, ch), dtype=np.int64)
        for k in self.loop(0, ch):
            for r in self.loop(1, ho):
                for q in self.loop(2, wo):
                    window = x[2 * r:2 * r + 2, 2 * q:2 * q + 2, k].ravel()
                    for v in window:
                        em.load(int(v), c.load)
                    em.quiet(c.pool_compare)
                    m = int(window.max())
                    em.load(m, c.load)
                    out[r, q, k] = m
        return out

    def run(self, net: Network, x) -> np.ndarray:
        a = np.asarray(x, dtype=np.int64).reshape(net.input_shape)
        for li, layer in enumerate(net.layers):
            if layer.kind is LayerKind.FC:
                a = self.fc(li, layer, a.reshape(-1))
            elif layer.kind is LayerKind.CONV:
                a = self.conv(li, layer, a)
            else:
                a = self.pool(li, a)
        return a.reshape(-1)


def _streams(seed: int) -> tuple[np.random.Generator, PhiloxSource]:
    noise_seq, trng_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(noise_seq), PhiloxSource(trng_seq)


def run_program(net: Network, x, mode: str, seed: int = 0, k: int = shufcore.DEFAULT_BINS,
                bits: int = DEFAULT_RNG_BITS, costs: CycleCostTable = DEFAULT_COSTS,
                record: bool = False, annotate: bool = False) -> tuple[Executor, np.ndarray]:
    _, trng = _streams(seed)
    ex = Executor(mode, trng, k, bits, costs, record, annotate)
    out = ex.run(net, x)
    return ex, out


def trace_infer(net: Network, x, mode: str = "baseline", model: LeakModel = LeakModel(), seed: int = 0,
                k: int = shufcore.DEFAULT_BINS, bits: int = DEFAULT_RNG_BITS,
                costs: CycleCostTable = DEFAULT_COSTS, annotate: bool = False) -> PowerTrace:
    """Simulate one inference and return its power trace."""
    noise, trng = _streams(seed)
    ex = Executor(mode, trng, k, bits, costs, record=True, annotate=annotate)
    out = ex.run(net, x)
    hw = HW_LUT[np.asarray(ex.em.words, dtype=np.int64)]
    samples = model.baseline + model.alpha * hw.astype(np.float64)
    if model.noise_sigma > 0:
        samples = samples + noise.normal(0.0, model.noise_sigma, size=len(samples))
    meta = {
        "seed": seed, "mode": ex.mode, "k": k, "rng_bits": bits, "network": net.name,
        "alpha": model.alpha, "noise_sigma": model.noise_sigma, "baseline": model.baseline,
        "output": [int(v) for v in out],
    }
    return PowerTrace(samples.astype(np.float32), ex.em.notes, meta)


def cycle_count(net: Network, mode: str, x=None, seed: int = 0, k: int = shufcore.DEFAULT_BINS,
                bits: int = DEFAULT_RNG_BITS, costs: CycleCostTable = DEFAULT_COSTS) -> int:
    if x is None:
        x = np.zeros(net.input_shape, dtype=np.int64)
    ex, _ = run_program(net, x, mode, seed, k, bits, costs)
    return ex.em.count


def measure_overhead(net: Network, mode: str, x=None, seed: int = 0, k: int = shufcore.DEFAULT_BINS,
                     bits: int = DEFAULT_RNG_BITS, costs: CycleCostTable = DEFAULT_COSTS) -> float:
    """Relative cycle overhead of ``mode`` over Baseline (0.25 means 25% more cycles)."""
    base = cycle_count(net, "baseline", x, seed, k, bits, costs)
    other = cycle_count(net, mode, x, seed, k, bits, costs)
    return (other - base) / base
