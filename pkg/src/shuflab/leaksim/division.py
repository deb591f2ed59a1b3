"""Restoring software division as executed by the modelled firmware.

The routine first shifts the divisor left until its top bit lines up with the
dividend's (bit normalisation), then runs one restoring step per shift plus
one. Each step compares the dividend shifted right against the original
divisor, which is equivalent to comparing against the shifted divisor.
Both branches of a step take the same time, so latency depends only on the
number of normalisation shifts.
"""
from __future__ import annotations

import numpy as np

from ..errors import DivisionByZeroError
from .model import DEFAULT_COSTS, CycleCostTable

MASK32 = 0xFFFFFFFF

Leak = tuple[str, int] | None


def normalisation_shifts(a: int, b: int) -> int:
    return max(0, a.bit_length() - b.bit_length())


def software_divide(a: int, b: int, costs: CycleCostTable = DEFAULT_COSTS) -> tuple[int, int, list[Leak]]:
    """Return (quotient, remainder, per-cycle log of (register, value) or None for quiet cycles)."""
    if b == 0:
        raise DivisionByZeroError("division by zero")
    a &= MASK32
    b &= MASK32
    log: list[Leak] = [None] * costs.div_prologue
    s = normalisation_shifts(a, b)
    bs, i = b, 1
    for _ in range(s):
        bs <<= 1
        i <<= 1
        log += [("b", bs), ("i", i)] + [None] * (costs.div_norm_step - 2)
    log += [None] * costs.div_norm_exit
    q, n = 0, s
    for _ in range(s + 1):
        q <<= 1
        t = a >> n
        log += [("q", q), ("t", t), ("c", (t - b) & MASK32)]
        if t >= b:
            a -= bs
            q |= 1
        bs >>= 1
        i >>= 1
        log += [("a", a), ("q", q), ("b", bs), ("i", i)] + [None] * (costs.div_step - 7)
        n -= 1
    log += [None] * costs.div_epilogue
    return q, a, log


def division_latency(a: int, b: int, costs: CycleCostTable = DEFAULT_COSTS) -> int:
    if b == 0:
        raise DivisionByZeroError("division by zero")
    return costs.div_latency(normalisation_shifts(a, b))


def log_words(log: list[Leak]) -> list[int]:
    return [0 if e is None else e[1] & 0xFFFF for e in log]


def divide_batch(a, b) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised (q, r, shifts) for arrays of operands, same algorithm as software_divide."""
    a = np.asarray(a, dtype=np.int64).copy()
    b = np.broadcast_to(np.asarray(b, dtype=np.int64), a.shape).copy()
    if np.any(b == 0):
        raise DivisionByZeroError("division by zero")
    s = np.maximum(0, bit_length(a) - bit_length(b))
    q = np.zeros_like(a)
    for n in range(int(s.max(initial=0)), -1, -1):
        active = s >= n
        t = a >> n
        take = active & (t >= b)
        a = np.where(take, a - (b << n), a)
        q = np.where(active, (q << 1) | take, q)
    return q, a, s


def bit_length(v) -> np.ndarray:
    return np.frexp(np.asarray(v, dtype=np.float64))[1].astype(np.int64)


def division_leak_matrix(a, b: int, shifts: int, costs: CycleCostTable = DEFAULT_COSTS) -> np.ndarray:
    """Leaked 16-bit words of software_divide for many dividends sharing (b, shifts)."""
    a = np.asarray(a, dtype=np.int64).copy()
    cols: list[np.ndarray] = []
    zero = np.zeros_like(a)
    const = lambda v: np.full_like(a, v & 0xFFFF)
    cols += [zero] * costs.div_prologue
    bs, i = b, 1
    for _ in range(shifts):
        bs <<= 1
        i <<= 1
        cols += [const(bs), const(i)] + [zero] * (costs.div_norm_step - 2)
    cols += [zero] * costs.div_norm_exit
    q = np.zeros_like(a)
    n = shifts
    for _ in range(shifts + 1):
        q = q << 1
        t = a >> n
        cols += [q & 0xFFFF, t & 0xFFFF, (t - b) & 0xFFFF]
        take = t >= b
        a = np.where(take, a - bs, a)
        q = q | take
        bs >>= 1
        i >>= 1
        cols += [a & 0xFFFF, q & 0xFFFF, const(bs), const(i)] + [zero] * (costs.div_step - 7)
        n -= 1
    cols += [zero] * costs.div_epilogue
    return np.stack(cols, axis=1)
