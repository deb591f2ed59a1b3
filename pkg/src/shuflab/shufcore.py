"""Behavioural model of the bin/counter hardware shuffler.

A bank splits a loop of N iterations into k contiguous bins. Each bin has a
current-count and a max-count register; a random request picks a bin, the
round-robin arbiter (RRA) redirects the request to the nearest allowed bin, and
the chosen bin's counter is emitted and incremented. Orders are therefore
random across bins but ascending within a bin.

Also here: the permutation-count combinatorics, attack-time estimates and the
SHFL_LD / SHFL_GNI instruction codecs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .entropy import EntropySource
from .errors import ConfigurationError, ExhaustedBankError, FormatError

MAX_ITERATIONS = 16384
MAX_BINS = 128
DEFAULT_BINS = 16
NUM_BANKS = 4
REGISTER_BITS = 10
READY_DELAY = 3
SECONDS_PER_YEAR = 31_536_000


def _check_bins(k: int) -> None:
    if k < 1 or k > MAX_BINS or k & (k - 1):
        raise ConfigurationError(f"bin count must be a power of two in [1, {MAX_BINS}], got {k}")


@dataclass(frozen=True)
class BinPartition:
    N: int
    k: int
    a: int
    b: int | None
    sizes: tuple[int, ...]

    @property
    def divisible(self) -> bool:
        return self.N % self.k == 0

    def start(self, i: int) -> int:
        return i * self.a

    def ranges(self) -> list[range]:
        return [range(i * self.a, i * self.a + s) for i, s in enumerate(self.sizes)]


def bin_partition(N: int, k: int) -> BinPartition:
    """Split ``N`` iterations into ``k`` bins of size ceil(N/k).

    ``b`` is the size of the last bin under the two-case formula, or None when
    that formula does not apply ((k-1)*a > N, e.g. N=5, k=4, where two trailing
    bins are short). ``sizes`` is always authoritative.
    """
    if not 1 <= N <= MAX_ITERATIONS:
        raise ConfigurationError(f"N must be in [1, {MAX_ITERATIONS}], got {N}")
    _check_bins(k)
    a = -(-N // k)
    sizes = tuple(min(a, max(0, N - i * a)) for i in range(k))
    if N % k == 0:
        b: int | None = 0
    else:
        rest = N - (k - 1) * a
        b = rest if rest >= 0 else None
    return BinPartition(N, k, a, b, sizes)


def rra_pick(allow_mask: int, requested: int, k: int) -> int:
    """Round-robin arbiter: the requested bin if allowed, else the next allowed one upward (circular)."""
    if allow_mask & ((1 << k) - 1) == 0:
        raise ExhaustedBankError("no allowed bin left")
    for step in range(k):
        idx = (requested + step) % k
        if allow_mask >> idx & 1:
            return idx
    raise AssertionError("unreachable")


@dataclass
class ShufflerBank:
    k: int = DEFAULT_BINS
    reg_bits: int = REGISTER_BITS
    current_count: list[int] = field(default_factory=list)
    max_count: list[int] = field(default_factory=list)
    allow_mask: int = 0
    next_iteration: int | None = None
    cycles_until_ready: int = 0
    auto_reload: bool = False
    partition: BinPartition | None = None
    _rng: EntropySource | None = None

    @property
    def loaded(self) -> bool:
        return self.partition is not None

    @property
    def valid(self) -> bool:
        return self.next_iteration is not None

    def load(self, n: int, rng: EntropySource, auto_reload: bool = False) -> None:
        part = bin_partition(n, self.k)
        if part.a > 1 << self.reg_bits:
            raise ConfigurationError(
                f"bin size {part.a} exceeds {self.reg_bits}-bit counter registers (N={n}, k={self.k})"
            )
        self.partition = part
        self._rng = rng
        self.auto_reload = auto_reload
        self._arm()
        self._select()

    def _arm(self) -> None:
        part = self.partition
        self.current_count = [part.start(i) for i in range(self.k)]
        self.max_count = [part.start(i) + max(s, 1) - 1 for i, s in enumerate(part.sizes)]
        self.allow_mask = sum(1 << i for i, s in enumerate(part.sizes) if s > 0)

    def _select(self) -> None:
        if self.allow_mask == 0:
            self.next_iteration = None
            return
        nbits = self.k.bit_length() - 1
        requested = self._rng.bits(nbits) if nbits else 0
        chosen = rra_pick(self.allow_mask, requested, self.k)
        self.next_iteration = self.current_count[chosen]
        if self.current_count[chosen] >= self.max_count[chosen]:
            self.allow_mask &= ~(1 << chosen)
        else:
            self.current_count[chosen] += 1
        self.cycles_until_ready = READY_DELAY

    def elapse(self, cycles: int) -> None:
        self.cycles_until_ready = max(0, self.cycles_until_ready - cycles)

    def read(self) -> tuple[int, int]:
        """Return (index, stall cycles) and start selecting the following index."""
        if not self.loaded:
            raise ExhaustedBankError("bank not loaded")
        if self.next_iteration is None:
            raise ExhaustedBankError("bank drained")
        value, stall = self.next_iteration, self.cycles_until_ready
        if self.allow_mask == 0 and self.auto_reload:
            self._arm()
        self._select()
        return value, stall


@dataclass
class ShufflerUnit:
    rng: EntropySource
    k: int = DEFAULT_BINS
    reg_bits: int = REGISTER_BITS
    banks: list[ShufflerBank] = field(default_factory=list)

    def __post_init__(self):
        _check_bins(self.k)
        if not self.banks:
            self.banks = [ShufflerBank(self.k, self.reg_bits) for _ in range(NUM_BANKS)]

    def bank(self, bank_id: int) -> ShufflerBank:
        if not 0 <= bank_id < len(self.banks):
            raise ConfigurationError(f"invalid bank {bank_id}")
        return self.banks[bank_id]

    def elapse(self, cycles: int) -> None:
        for b in self.banks:
            b.elapse(cycles)


def load_bank(unit: ShufflerUnit, bank_id: int, n: int, auto_reload: bool = False) -> None:
    unit.bank(bank_id).load(n, unit.rng, auto_reload)


def get_next_iteration(unit: ShufflerUnit, bank_id: int) -> int:
    return unit.bank(bank_id).read()[0]


def drain(n: int, k: int, rng: EntropySource) -> list[int]:
    """Load a fresh bank and read out all ``n`` indices."""
    bank = ShufflerBank(k, reg_bits=max(REGISTER_BITS, n.bit_length()))
    bank.load(n, rng)
    return [bank.read()[0] for _ in range(n)]


# -- combinatorics ---------------------------------------------------------

def permutation_count(N: int, k: int) -> int:
    """Number of distinct orders a bank can emit: N! over the product of bin-size factorials."""
    part = bin_partition(N, k)
    denom = 1
    for s in part.sizes:
        denom *= math.factorial(s)
    return math.factorial(N) // denom


def attack_time_years(N: int, k: int, traces_per_second: float = 1000) -> Fraction:
    """Years needed to collect one trace per reachable order, as an exact rational."""
    if traces_per_second <= 0:
        raise ConfigurationError("traces_per_second must be positive")
    return Fraction(permutation_count(N, k)) / Fraction(traces_per_second) / SECONDS_PER_YEAR


def format_sci(value: Fraction | int | float, digits: int = 3) -> str:
    """Upper-case scientific notation with ``digits`` significant figures, e.g. 1.91E-02."""
    v = Fraction(value)
    if v == 0:
        return f"{0:.{digits - 1}f}E+00"
    sign = "-" if v < 0 else ""
    v = abs(v)
    exp = math.floor(math.log10(v.numerator) - math.log10(v.denominator))
    # correct float estimate of the exponent
    while v >= Fraction(10) ** (exp + 1):
        exp += 1
    while v < Fraction(10) ** exp:
        exp -= 1
    scale = Fraction(10) ** (digits - 1 - exp)
    mant = math.floor(v * scale + Fraction(1, 2))
    if mant >= 10**digits:
        mant //= 10
        exp += 1
    text = str(mant)
    body = text[0] + ("." + text[1:] if digits > 1 else "")
    return f"{sign}{body}E{'+' if exp >= 0 else '-'}{abs(exp):02d}"


# -- instruction encodings --------------------------------------------------

COND_ALWAYS = 0b1110
SHFL_LD_OPCODE = 0x7F
SHFL_GNI_OPCODE = 0x7E


@dataclass(frozen=True)
class ShflLd:
    bank: int
    set: int
    reg: int
    value: int


@dataclass(frozen=True)
class ShflGni:
    bank: int
    dest_reg: int


def _field(name: str, v: int, width: int) -> int:
    if not 0 <= v < 1 << width:
        raise FormatError(f"{name}={v} does not fit in {width} bits")
    return v


def encode_shfl_ld(bank: int, set: int, reg: int, value: int) -> int:
    return (
        COND_ALWAYS << 28
        | SHFL_LD_OPCODE << 20
        | _field("bank", bank, 2) << 18
        | _field("set", set, 1) << 17
        | _field("reg", reg, 7) << 10
        | _field("value", value, 10)
    )


def _check_header(word: int, opcode: int) -> None:
    if not 0 <= word < 1 << 32:
        raise FormatError("instruction word must be 32-bit")
    if word >> 28 != COND_ALWAYS or (word >> 20) & 0xFF != opcode:
        raise FormatError(f"not a shuffler instruction: {word:#010x}")


def decode_shfl_ld(word: int) -> ShflLd:
    _check_header(word, SHFL_LD_OPCODE)
    return ShflLd((word >> 18) & 0x3, (word >> 17) & 0x1, (word >> 10) & 0x7F, word & 0x3FF)


def encode_shfl_gni(bank: int, dest_reg: int) -> int:
    return COND_ALWAYS << 28 | SHFL_GNI_OPCODE << 20 | _field("bank", bank, 2) << 18 | _field("dest_reg", dest_reg, 4)


def decode_shfl_gni(word: int) -> ShflGni:
    _check_header(word, SHFL_GNI_OPCODE)
    if (word >> 4) & 0x3FFF:
        raise FormatError("SHFL_GNI bits [17:4] must be zero")
    return ShflGni((word >> 18) & 0x3, word & 0xF)


def bank_load_program(bank_id: int, n: int, k: int = DEFAULT_BINS) -> list[int]:
    """SHFL_LD words that configure a bank: current (set 0) and max (set 1) per bin, as bin-relative offsets."""
    part = bin_partition(n, k)
    words = []
    for i, s in enumerate(part.sizes):
        words.append(encode_shfl_ld(bank_id, 0, i, 0))
        words.append(encode_shfl_ld(bank_id, 1, i, max(s, 1) - 1))
    return words
