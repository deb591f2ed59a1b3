"""Entropy sources standing in for the TRNG.

Anything with a ``bits(n)`` method returning an int in ``[0, 2**n)`` can be
plugged into the shuffler unit or the Fisher-Yates routine.
"""
from __future__ import annotations

from typing import Iterable, Protocol

import numpy as np


class EntropySource(Protocol):
    def bits(self, n: int) -> int: ...


class PhiloxSource:
    """Counter-based deterministic generator (numpy Philox), buffered."""

    def __init__(self, seed: int | np.random.SeedSequence = 0, block: int = 4096):
        self._gen = np.random.Generator(np.random.Philox(seed))
        self._block = block
        self._buf = np.empty(0, dtype=np.uint32)
        self._pos = 0

    def _word(self) -> int:
        if self._pos >= len(self._buf):
            self._buf = self._gen.integers(0, 2**32, size=self._block, dtype=np.uint32)
            self._pos = 0
        w = int(self._buf[self._pos])
        self._pos += 1
        return w

    def bits(self, n: int) -> int:
        if n <= 0:
            return 0
        if n > 32:
            raise ValueError("at most 32 bits per draw")
        return self._word() >> (32 - n)


class ScriptedSource:
    """Replays a fixed list of words (masked to the requested width)."""

    def __init__(self, values: Iterable[int]):
        self._values = list(values)
        self._pos = 0
        self.draws: list[int] = []

    def bits(self, n: int) -> int:
        if self._pos >= len(self._values):
            raise RuntimeError("scripted entropy exhausted")
        v = self._values[self._pos] & ((1 << n) - 1)
        self._pos += 1
        self.draws.append(v)
        return v

    @property
    def remaining(self) -> int:
        return len(self._values) - self._pos
