"""Q4.11 fixed-point arithmetic and a minimal FC / Conv2D / MaxPool network model.

All tensors hold raw int16 words. Accumulation happens in a 32-bit wrapping
integer and is saturated once at the end, so the result does not depend on
the order in which loop iterations run.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from .entropy import EntropySource, PhiloxSource
from .errors import ConfigurationError, FormatError
from . import shufcore

FRAC_BITS = 11
ONE = 1 << FRAC_BITS
RAW_MIN, RAW_MAX = -(1 << 15), (1 << 15) - 1


def saturate16(v):
    return np.clip(v, RAW_MIN, RAW_MAX) if isinstance(v, np.ndarray) else max(RAW_MIN, min(RAW_MAX, v))


def wrap32(v):
    if isinstance(v, np.ndarray):
        return ((v.astype(np.int64) + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)
    return ((v + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)


def to_raw(x: float) -> int:
    """Nearest Q4.11 word, ties away from zero, saturated."""
    scaled = abs(x) * ONE
    r = math.floor(scaled + 0.5)
    return saturate16(-r if x < 0 else r)


def to_raw_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    r = np.floor(np.abs(x) * ONE + 0.5) * np.sign(x)
    return np.clip(r, RAW_MIN, RAW_MAX).astype(np.int16)


def to_float(raw) -> float | np.ndarray:
    if isinstance(raw, np.ndarray):
        return raw.astype(np.float64) / ONE
    return raw / ONE


@dataclass(frozen=True, order=True)
class FixedPoint:
    raw: int

    def __post_init__(self):
        if not RAW_MIN <= self.raw <= RAW_MAX:
            raise ConfigurationError(f"raw value {self.raw} outside int16")

    @classmethod
    def from_float(cls, x: float) -> "FixedPoint":
        return cls(to_raw(x))

    def __float__(self) -> float:
        return self.raw / ONE

    def __mul__(self, other: "FixedPoint") -> "FixedPoint":
        return fxp_mul(self, other)

    def __repr__(self) -> str:
        return f"FixedPoint({self.raw / ONE!r})"


def mul_raw(a: int, b: int) -> int:
    """Rounded, saturated Q4.11 product of two raw words."""
    p = a * b
    q = (abs(p) + (1 << (FRAC_BITS - 1))) >> FRAC_BITS
    return saturate16(-q if p < 0 else q)


def mul_raw_array(a, b) -> np.ndarray:
    p = np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)
    q = (np.abs(p) + (1 << (FRAC_BITS - 1))) >> FRAC_BITS
    return np.clip(np.where(p < 0, -q, q), RAW_MIN, RAW_MAX)


def fxp_mul(a: FixedPoint, b: FixedPoint) -> FixedPoint:
    return FixedPoint(mul_raw(a.raw, b.raw))


# -- activations -------------------------------------------------------------

class Activation(str, Enum):
    NONE = "None"
    RELU = "ReLU"
    SIGMOID = "Sigmoid"
    TANH = "Tanh"
    SOFTMAX = "Softmax"


def _bin_lut(fn) -> np.ndarray:
    centers = ((np.arange(256) - 128) * 256 + 128) / ONE
    return to_raw_array(fn(centers)).astype(np.int64)


SIGMOID_LUT = _bin_lut(lambda x: 1.0 / (1.0 + np.exp(-x)))
TANH_LUT = _bin_lut(np.tanh)
# exp over [-16, 0] in steps of 1/16; index 255 is exp(0)
EXP_LUT = to_raw_array(np.exp((np.arange(256) - 255) * 128 / ONE)).astype(np.int64)


def _lut_index(z):
    return np.clip((np.asarray(z, dtype=np.int64) >> 8) + 128, 0, 255)


def activate(kind: Activation | str, z) -> np.ndarray:
    """Apply an activation to raw pre-activations (a vector for Softmax)."""
    kind = Activation(kind)
    z = np.asarray(z, dtype=np.int64)
    if kind is Activation.NONE:
        return z.copy()
    if kind is Activation.RELU:
        return np.maximum(z, 0)
    if kind is Activation.SIGMOID:
        return SIGMOID_LUT[_lut_index(z)]
    if kind is Activation.TANH:
        return TANH_LUT[_lut_index(z)]
    e = softmax_exponents(z)
    total = int(e.sum())
    return (e * ONE + total // 2) // total


def softmax_exponents(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.int64)
    d = z - z.max()
    return EXP_LUT[np.clip(255 + (d >> 7), 0, 255)]


# -- layers ----------------------------------------------------------------

class LayerKind(str, Enum):
    FC = "FC"
    CONV = "Conv2D"
    POOL = "MaxPool"


@dataclass
class Layer:
    kind: LayerKind
    dims: tuple[int, ...]
    weights: np.ndarray | None = None
    biases: np.ndarray | None = None
    activation: Activation = Activation.NONE

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        self.activation = Activation(self.activation)
        self.dims = tuple(int(d) for d in self.dims)
        if self.kind is LayerKind.POOL:
            if self.weights is not None or self.biases is not None or self.activation is not Activation.NONE:
                raise ConfigurationError("MaxPool takes no weights, biases or activation")
            if self.dims != (2, 2):
                raise ConfigurationError("only 2x2 max pooling is modelled")
            return
        shape = self.weight_shape
        if self.weights is None or self.biases is None:
            raise ConfigurationError(f"{self.kind.value} layer needs weights and biases")
        self.weights = np.asarray(self.weights, dtype=np.int16)
        self.biases = np.asarray(self.biases, dtype=np.int16)
        if self.weights.size != math.prod(self.dims):
            raise ConfigurationError(f"weight count {self.weights.size} != prod{self.dims}")
        self.weights = self.weights.reshape(shape)
        if self.biases.shape != (self.n_out,):
            raise ConfigurationError(f"expected {self.n_out} biases, got {self.biases.shape}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.FC:
            n_in, n_out = self.dims
            return (n_out, n_in)
        kw, kh, cin, cout = self.dims
        return (cout, cin, kh, kw)

    @property
    def n_out(self) -> int:
        if self.kind is LayerKind.FC:
            return self.dims[1]
        if self.kind is LayerKind.CONV:
            return self.dims[3]
        raise ConfigurationError("MaxPool has no neurons")

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind is LayerKind.FC:
            if math.prod(in_shape) != self.dims[0]:
                raise ConfigurationError(f"FC expects {self.dims[0]} inputs, got shape {in_shape}")
            return (self.dims[1],)
        if len(in_shape) != 3:
            raise ConfigurationError(f"{self.kind.value} expects (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        if self.kind is LayerKind.POOL:
            if h % 2 or w % 2:
                raise ConfigurationError(f"MaxPool needs even spatial dims, got {h}x{w}")
            return (h // 2, w // 2, c)
        kw, kh, cin, cout = self.dims
        if c != cin or h < kh or w < kw:
            raise ConfigurationError(f"conv {self.dims} does not fit input {in_shape}")
        return (h - kh + 1, w - kw + 1, cout)


@dataclass
class Network:
    input_shape: tuple[int, ...]
    layers: list[Layer] = field(default_factory=list)
    name: str = "net"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Shape entering each layer, plus the final output shape."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    @property
    def fc_sizes(self) -> list[int]:
        """Input width followed by each FC layer's width (FC-only nets)."""
        return [self.layers[0].dims[0]] + [l.dims[1] for l in self.layers]

    def copy(self) -> "Network":
        layers = [
            Layer(l.kind, l.dims,
                  None if l.weights is None else l.weights.copy(),
                  None if l.biases is None else l.biases.copy(),
                  l.activation)
            for l in self.layers
        ]
        return Network(self.input_shape, layers, self.name)


# -- iteration sources -------------------------------------------------------

class IterationSource(Protocol):
    def order(self, n: int) -> list[int]:
        """Index order for one execution of a loop of length ``n``."""
        ...


class Sequential:
    def order(self, n: int) -> list[int]:
        return list(range(n))


class SoftwareShuffled:
    """Fisher-Yates with ``rand() % (i+1)`` on l-bit entropy words."""

    def __init__(self, rng: EntropySource, bits: int = 14):
        self.rng = rng
        self.bits = bits

    def order(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.rng.bits(self.bits) % (i + 1)
            items[i], items[j] = items[j], items[i]
        return items


class HardwareShuffled:
    """Reads indices from one shuffler bank, loading it on first use of each length."""

    def __init__(self, unit: shufcore.ShufflerUnit, bank_id: int):
        self.unit = unit
        self.bank_id = bank_id
        self._loaded_n: int | None = None

    def order(self, n: int) -> list[int]:
        bank = self.unit.bank(self.bank_id)
        if self._loaded_n != n:
            shufcore.load_bank(self.unit, self.bank_id, n, auto_reload=True)
            self._loaded_n = n
        return [bank.read()[0] for _ in range(n)]


def make_sources(mode: str, count: int, seed: int = 0, k: int = shufcore.DEFAULT_BINS,
                 bits: int = 14) -> list[IterationSource]:
    """``count`` iteration sources for one layer in the given execution mode."""
    mode = mode.lower()
    if mode == "baseline":
        return [Sequential() for _ in range(count)]
    rng = PhiloxSource(seed)
    if mode == "swshuffle":
        return [SoftwareShuffled(rng, bits) for _ in range(count)]
    if mode == "hwshuffle":
        unit = shufcore.ShufflerUnit(rng, k=k)
        return [HardwareShuffled(unit, i) for i in range(count)]
    raise ConfigurationError(f"unknown mode {mode!r}")


# -- forward passes ----------------------------------------------------------

def neuron_preactivation(weights_row: np.ndarray, x: np.ndarray, bias: int, order: Sequence[int] | None = None) -> int:
    """Wrapping 32-bit sum of rounded products plus bias, saturated to Q4.11."""
    idx = range(len(x)) if order is None else order
    acc = 0
    for j in idx:
        acc = wrap32(acc + mul_raw(int(x[j]), int(weights_row[j])))
    return saturate16(wrap32(acc + int(bias)))


def fc_preactivation(layer: Layer, x: np.ndarray) -> np.ndarray:
    """Vectorised pre-activations for a batch (..., n_in)."""
    x = np.asarray(x, dtype=np.int64)
    prods = mul_raw_array(x[..., None, :], layer.weights.astype(np.int64))
    acc = wrap32(prods.sum(axis=-1))
    return saturate16(wrap32(acc + layer.biases.astype(np.int64)))


def fc_forward(layer: Layer, x, src_outer: IterationSource, src_inner: IterationSource) -> np.ndarray:
    if layer.kind is not LayerKind.FC:
        raise ConfigurationError("fc_forward needs an FC layer")
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    n_in, n_out = layer.dims
    if x.size != n_in:
        raise ConfigurationError(f"input length {x.size} != {n_in}")
    z = np.zeros(n_out, dtype=np.int64)
    for i in _checked(src_outer.order(n_out), n_out):
        inner = _checked(src_inner.order(n_in), n_in)
        z[i] = neuron_preactivation(layer.weights[i], x, layer.biases[i], inner)
    return activate(layer.activation, z)


def conv_forward(layer: Layer, x, src_cin: IterationSource, src_cout: IterationSource,
                 src_row: IterationSource, src_col: IterationSource) -> np.ndarray:
    if layer.kind is not LayerKind.CONV:
        raise ConfigurationError("conv_forward needs a Conv2D layer")
    x = np.asarray(x, dtype=np.int64)
    ho, wo, cout = layer.output_shape(x.shape)
    kw, kh, cin, _ = layer.dims
    w = layer.weights
    out = np.zeros((ho, wo, cout), dtype=np.int64)
    for co in _checked(src_cout.order(cout), cout):
        for r in _checked(src_row.order(ho), ho):
            for c in _checked(src_col.order(wo), wo):
                acc = 0
                for ci in _checked(src_cin.order(cin), cin):
                    for kr in range(kh):
                        for kc in range(kw):
                            acc = wrap32(acc + mul_raw(int(x[r + kr, c + kc, ci]), int(w[co, ci, kr, kc])))
                out[r, c, co] = saturate16(wrap32(acc + int(layer.biases[co])))
    if layer.activation is Activation.SOFTMAX:
        raise ConfigurationError("Softmax on a conv layer is not supported")
    return activate(layer.activation, out)


def conv_reference(layer: Layer, x) -> np.ndarray:
    """Vectorised conv used for fast inference and as a cross-check."""
    x = np.asarray(x, dtype=np.int64)
    ho, wo, cout = layer.output_shape(x.shape)
    kw, kh, cin, _ = layer.dims
    w = layer.weights.astype(np.int64)
    acc = np.zeros((ho, wo, cout), dtype=np.int64)
    for ci in range(cin):
        for kr in range(kh):
            for kc in range(kw):
                patch = x[kr:kr + ho, kc:kc + wo, ci]
                acc += mul_raw_array(patch[..., None], w[:, ci, kr, kc])
    z = saturate16(wrap32(wrap32(acc) + layer.biases.astype(np.int64)))
    return activate(layer.activation, z)


def maxpool_forward(layer: Layer, x, src_row: IterationSource, src_col: IterationSource,
                    src_chan: IterationSource) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    ho, wo, ch = layer.output_shape(x.shape)
    out = np.zeros((ho, wo, ch), dtype=np.int64)
    for c in _checked(src_chan.order(ch), ch):
        for r in _checked(src_row.order(ho), ho):
            for q in _checked(src_col.order(wo), wo):
                out[r, q, c] = x[2 * r:2 * r + 2, 2 * q:2 * q + 2, c].max()
    return out


def maxpool_reference(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"MaxPool needs even spatial dims, got {h}x{w}")
    return x.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


def _checked(order: list[int], n: int) -> list[int]:
    if sorted(order) != list(range(n)):
        raise ConfigurationError("iteration source did not yield a permutation")
    return order


def network_infer(net: Network, x, mode: str = "baseline", seed: int = 0,
                  k: int = shufcore.DEFAULT_BINS) -> tuple[np.ndarray, int]:
    """Run the net loop by loop with iteration sources of the given mode."""
    a = np.asarray(x, dtype=np.int64).reshape(net.input_shape)
    for li, layer in enumerate(net.layers):
        srcs = make_sources(mode, 4, seed=seed * 1000 + li, k=k)
        if layer.kind is LayerKind.FC:
            a = fc_forward(layer, a.reshape(-1), srcs[0], srcs[1])
        elif layer.kind is LayerKind.CONV:
            a = conv_forward(layer, a, srcs[3], srcs[0], srcs[1], srcs[2])
        else:
            a = maxpool_forward(layer, a, srcs[1], srcs[2], srcs[0])
    out = a.reshape(-1)
    return out, int(np.argmax(out))


def forward_batch(net: Network, X) -> np.ndarray:
    """Sequential-order outputs for a batch of inputs, vectorised where possible."""
    X = np.asarray(X, dtype=np.int64)
    outs = []
    if all(l.kind is LayerKind.FC for l in net.layers):
        a = X.reshape(len(X), -1)
        for layer in net.layers:
            z = fc_preactivation(layer, a)
            if layer.activation is Activation.SOFTMAX:
                a = np.stack([activate(layer.activation, row) for row in z])
            else:
                a = activate(layer.activation, z)
        return a
    for x in X:
        a = x.reshape(net.input_shape)
        for layer in net.layers:
            if layer.kind is LayerKind.FC:
                z = fc_preactivation(layer, a.reshape(-1))
                a = activate(layer.activation, z)
            elif layer.kind is LayerKind.CONV:
                a = conv_reference(layer, a)
            else:
                a = maxpool_reference(a)
        outs.append(a.reshape(-1))
    return np.stack(outs)


def accuracy(net: Network, X, labels) -> float:
    pred = forward_batch(net, X).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# -- synthetic networks and data ---------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: tuple[int, ...]
    activation: str = "None"


def random_network(input_shape, specs: Sequence[LayerSpec], seed: int = 0, name: str = "net") -> Network:
    """Seeded random weights scaled so pre-activations stay well inside Q4.11."""
    rng = np.random.default_rng(seed)
    layers = []
    for s in specs:
        kind = LayerKind(s.kind)
        if kind is LayerKind.POOL:
            layers.append(Layer(kind, s.dims))
            continue
        fan_in = s.dims[0] if kind is LayerKind.FC else s.dims[0] * s.dims[1] * s.dims[2]
        scale = min(1.0, 2.0 / math.sqrt(fan_in))
        w = to_raw_array(rng.uniform(-scale, scale, size=math.prod(s.dims)))
        n_out = s.dims[1] if kind is LayerKind.FC else s.dims[3]
        b = to_raw_array(rng.uniform(-0.25, 0.25, size=n_out))
        layers.append(Layer(kind, s.dims, w, b, Activation(s.activation)))
    return Network(tuple(input_shape), layers, name)


def mlp(sizes: Sequence[int], seed: int = 0, hidden: str = "ReLU", output: str = "None",
        name: str | None = None) -> Network:
    specs = [
        LayerSpec("FC", (sizes[i], sizes[i + 1]), hidden if i < len(sizes) - 2 else output)
        for i in range(len(sizes) - 1)
    ]
    return random_network((sizes[0],), specs, seed, name or "-".join(map(str, sizes)))


def random_inputs(shape, count: int, seed: int = 0) -> np.ndarray:
    """Inputs uniform on [-1, 1) in Q4.11."""
    rng = np.random.default_rng(seed)
    return rng.integers(-ONE, ONE, size=(count, *shape), dtype=np.int64)


def labeled_dataset(net: Network, per_class: int, seed: int = 0, pool: int = 20000) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced inputs labelled by the network itself.

    Raises when a class is too rare; run ``balance_output_biases`` on the
    network first so every class is reachable.
    """
    X = random_inputs(net.input_shape, pool, seed)
    labels = forward_batch(net, X).argmax(axis=1)
    counts = np.bincount(labels, minlength=net.shapes()[-1][0])
    keep = []
    rng = np.random.default_rng(seed + 1)
    for c in range(len(counts)):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per_class:
            raise ConfigurationError(f"class {c} has only {len(idx)} samples; rebalance the network")
        keep.append(rng.choice(idx, per_class, replace=False))
    keep = np.concatenate(keep)
    rng.shuffle(keep)
    return X[keep], labels[keep]


def balance_output_biases(net: Network, seed: int = 0, pool: int = 20000, rounds: int = 8) -> Network:
    """Shift last-layer biases so argmax classes occur roughly equally often."""
    net = net.copy()
    last = net.layers[-1]
    X = random_inputs(net.input_shape, pool, seed)
    for _ in range(rounds):
        out = forward_batch(net, X)
        counts = np.bincount(out.argmax(axis=1), minlength=last.n_out)
        if counts.min() >= pool / last.n_out / 2:
            break
        hidden = Network(net.input_shape, net.layers[:-1], net.name) if len(net.layers) > 1 else None
        a = X.reshape(pool, -1) if hidden is None else forward_batch(hidden, X)
        z = fc_preactivation(last, a)
        shift = np.median(z, axis=0) - np.median(z)
        last.biases = np.clip(last.biases.astype(np.int64) - shift.astype(np.int64), RAW_MIN, RAW_MAX).astype(np.int16)
    return net


# -- file format ---------------------------------------------------------------

def save_network(net: Network, path: str | Path) -> Path:
    """JSON descriptor plus a little-endian int16 blob next to it."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    layers, chunks, offset = [], [], 0
    for layer in net.layers:
        entry = {"kind": layer.kind.value, "dims": list(layer.dims), "activation": layer.activation.value}
        if layer.weights is not None:
            w = layer.weights.astype("<i2").ravel().tobytes()
            b = layer.biases.astype("<i2").ravel().tobytes()
            entry.update(weights_offset=offset, weights_count=layer.weights.size,
                         biases_offset=offset + len(w), biases_count=layer.biases.size)
            chunks += [w, b]
            offset += len(w) + len(b)
        layers.append(entry)
    desc = {"format": "shuflab-net", "version": 1, "name": net.name,
            "input_shape": list(net.input_shape), "blob": blob_path.name, "layers": layers}
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(desc, indent=2))
    return path


def load_network(path: str | Path) -> Network:
    path = Path(path)
    try:
        desc = json.loads(path.read_text())
        blob = (path.parent / desc["blob"]).read_bytes()
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    layers = []
    for e in desc["layers"]:
        w = b = None
        if "weights_offset" in e:
            w = np.frombuffer(blob, "<i2", e["weights_count"], e["weights_offset"]).astype(np.int16)
            b = np.frombuffer(blob, "<i2", e["biases_count"], e["biases_offset"]).astype(np.int16)
        layers.append(Layer(e["kind"], tuple(e["dims"]), w, b, e.get("activation", "None")))
    return Network(tuple(desc["input_shape"]), layers, desc.get("name", path.stem))


def iter_fc_layers(net: Network) -> Iterator[tuple[int, Layer]]:
    for i, layer in enumerate(net.layers):
        if layer.kind is LayerKind.FC:
            yield i, layer
