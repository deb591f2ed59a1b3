"""Leakage model, cycle-cost table and the fixed instruction patterns the
simulated firmware executes (used both to emit and to parse traces)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from ..fxnet import Activation

HW_LUT = np.array([bin(v).count("1") for v in range(1 << 16)], dtype=np.uint8)


def hamming_weight(v: int) -> int:
    """Population count of the low 16 bits."""
    return int(HW_LUT[v & 0xFFFF])


def hamming_weights(words) -> np.ndarray:
    return HW_LUT[np.asarray(words, dtype=np.int64) & 0xFFFF]


@dataclass(frozen=True)
class LeakModel:
    alpha: float = 1.0
    noise_sigma: float = 0.5
    baseline: float = 10.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")

    @classmethod
    def with_relative_noise(cls, ratio: float, alpha: float = 1.0, baseline: float = 10.0) -> "LeakModel":
        return cls(alpha, ratio * alpha, baseline)

    def expected(self, hw) -> np.ndarray:
        return self.baseline + self.alpha * np.asarray(hw, dtype=np.float64)

    def to_hw(self, samples) -> np.ndarray:
        """Map samples back to Hamming-weight units."""
        return (np.asarray(samples, dtype=np.float64) - self.baseline) / self.alpha


# constant words the firmware touches at fixed points; quiet cycles carry word 0
ACT_ENTRY = (0x0FFF, 0x0FFF, 0, 0x000F, 0x000F, 0)
ACT_EXIT = (0x3FFF, 0x3FFF, 0, 0x0003, 0x0003, 0)
DIV_LANDMARK = (0xFFFF, 0xFFFF, 0, 0xFFFF, 0x00FF, 0xFFFF)
SAT_CONSTS = (0x7FFF, 0x8000)


@dataclass(frozen=True)
class CycleCostTable:
    branch: int = 2
    addr: int = 3
    load: int = 2
    mul_round: int = 4
    saturate: int = 6
    call: int = 6
    accumulate: int = 2
    index: int = 2
    gni: int = 1
    shfl_ld: int = 1
    layer_prologue: int = 3
    neuron_prologue: int = 4
    bias_saturate: int = 3
    softmax_norm: int = 6
    pool_compare: int = 3
    # division routine
    div_prologue: int = 5
    div_norm_step: int = 3
    div_norm_exit: int = 1
    div_step: int = 8
    div_epilogue: int = 2
    # Fisher-Yates loop
    fy_entry: int = 2
    fy_head: int = 2
    fy_call: int = 2
    fy_exit: int = 2
    # activation latency ranges (min, max) in cycles
    act_cycles: dict = field(default_factory=lambda: {
        Activation.NONE: (2, 2),
        Activation.RELU: (6, 6),
        Activation.TANH: (51, 210),
        Activation.SIGMOID: (152, 222),
        Activation.SOFTMAX: (724, 877),
    })

    def __hash__(self):
        return hash(tuple(sorted((k, v) for k, v in self.__dict__.items() if k != "act_cycles")))

    # -- MAC block layout ------------------------------------------------
    def mac_prefix(self, mode: str) -> int:
        """Cycles spent obtaining the loop index before the address computation."""
        return {"baseline": 0, "hwshuffle": self.gni, "swshuffle": self.load}[mode]

    def mac_offsets(self, mode: str) -> dict[str, int]:
        p = self.branch + self.mac_prefix(mode)
        x = p + self.addr
        w = x + self.load
        prod = w + self.load
        sig = prod + 1 + self.mul_round
        return {"index": self.branch, "input": x, "weight": w, "product": prod, "sig": sig}

    def mac_block(self, mode: str) -> int:
        o = self.mac_offsets(mode)
        return o["sig"] + len(SAT_CONSTS) + self.saturate + self.call + self.accumulate + self.index

    def mac_template(self, mode: str) -> tuple[np.ndarray, np.ndarray]:
        """(expected words, known mask) for one MAC block; data cycles are masked out."""
        n = self.mac_block(mode)
        o = self.mac_offsets(mode)
        words = np.zeros(n, dtype=np.int64)
        known = np.ones(n, dtype=bool)
        words[o["sig"]:o["sig"] + 2] = SAT_CONSTS
        data = [o["input"], o["weight"], o["product"]]
        if mode == "swshuffle":
            data.append(o["index"])
        known[data] = False
        return words, known

    # -- neuron epilogue ---------------------------------------------------
    def epilogue_fixed(self) -> int:
        return self.load + 1 + self.bias_saturate + len(ACT_ENTRY) + len(ACT_EXIT) + self.load

    def act_range(self, kind) -> tuple[int, int]:
        return self.act_cycles[Activation(kind)]

    def act_latency(self, kind, layer: int, slot: int) -> int:
        lo, hi = self.act_range(kind)
        if hi == lo:
            return lo
        h = (layer * 0x9E3779B1 + slot * 0x85EBCA77 + 0x27D4EB2F) & 0xFFFFFFFF
        h ^= h >> 15
        h = (h * 0x2C1B3C6D) & 0xFFFFFFFF
        h ^= h >> 12
        return lo + h % (hi - lo + 1)

    # -- division / Fisher-Yates ---------------------------------------------
    def div_latency(self, shifts: int) -> int:
        return (self.div_prologue + self.div_norm_step * shifts + self.div_norm_exit
                + self.div_step * (shifts + 1) + self.div_epilogue)

    @property
    def fy_div_offset(self) -> int:
        """Cycles from the start of a Fisher-Yates iteration to the division call."""
        return self.fy_head + self.load + 1 + self.fy_call

    @property
    def fy_swap(self) -> int:
        return 2 + 4 * self.load

    def fy_iteration(self, t_div: int) -> int:
        return self.fy_div_offset + t_div + len(DIV_LANDMARK) + self.fy_swap

    def create_list(self, n: int) -> int:
        return 2 * n


DEFAULT_COSTS = CycleCostTable()
