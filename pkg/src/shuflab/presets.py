"""Desk-scaled versions of the benchmark networks.

Layer kinds and loop nesting follow the originals; widths are reduced so the
largest FC layer is at most 256x64.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError
from .fxnet import LayerSpec, Network, random_network


@dataclass(frozen=True)
class Preset:
    name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    original: str
    scaling: str

    @property
    def conv_heavy(self) -> bool:
        return any(l.kind == "Conv2D" for l in self.layers)

    def build(self, seed: int = 0) -> Network:
        return random_network(self.input_shape, self.layers, seed, self.name)


def _fc(n_in, n_out, act="ReLU"):
    return LayerSpec("FC", (n_in, n_out), act)


def _conv(k, cin, cout, act="ReLU"):
    return LayerSpec("Conv2D", (k, k, cin, cout), act)


_POOL = LayerSpec("MaxPool", (2, 2))

PRESETS: dict[str, Preset] = {p.name: p for p in [
    Preset("mnist-mlp", (256,), (_fc(256, 64), _fc(64, 10, "Softmax")),
           "F(768x128), F(128x10)", "inputs /3, hidden /2"),
    Preset("kws-mlp", (125,), (_fc(125, 72), _fc(72, 72), _fc(72, 10, "Softmax")),
           "F(250x144), F(144x144), F(144x10)", "widths /2"),
    Preset("mnist-cnn", (14, 14, 1), (_conv(3, 1, 6), _POOL, _conv(3, 6, 6), _POOL, _fc(24, 20),
                                      _fc(20, 10, "Softmax")),
           "C(3x3x1x6), C(3x3x6x6), F(150x20), F(20x10)", "input 28x28 -> 14x14"),
    Preset("har-cnn", (9, 3, 1), (_conv(2, 1, 16), _POOL, _fc(64, 32), _fc(32, 32), _fc(32, 6, "Softmax")),
           "C(2x2x1x128), F(5632x128), F(128x128), F(128x6)", "channels /8, hidden /4"),
    Preset("gesture-cnn", (24, 24, 1), (_conv(5, 1, 4), _POOL, _conv(3, 4, 8), _POOL, _conv(3, 8, 8), _POOL,
                                        _fc(8, 16), _fc(16, 10, "Softmax")),
           "C(5x5x1x32), C(3x3x32x64), C(3x3x64x64), F(5760x128), F(128x10)", "channels /8, hidden /8"),
    Preset("ecg-ae", (32,), (_fc(32, 64), _fc(64, 64), _fc(64, 32, "None")),
           "F(128x1024), F(1024x1024), F(1024x140)", "widths /16, input /4"),
    Preset("seizure-svm", (256,), (_fc(256, 20, "None"),),
           "F(2854x179)", "features /11, support vectors /9"),
    Preset("fc-32-10-5", (32,), (_fc(32, 10), _fc(10, 5, "None")),
           "32-10-5 FC network", "unscaled"),
]}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
