"""Shared-encoder U-Net with a depth decoder and a fully connected class head.

The encoder is hard-shared: both heads read the same parameter tensors. The
decoder only serves the depth map and the classifier only reads the globally
averaged bottleneck, so the three parameter groups are disjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable

import numpy as np

from . import nn
from .tensor import Tensor, relu

GROUPS = ("encoder", "decoder", "cls")


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 8
    input_size: int = 32
    num_classes: int = 10
    cls_hidden: int = 32
    upconv: bool = True  # 3x3 conv after each nearest-neighbour upsample

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        s = self.input_size
        if s < 1 or s & (s - 1):
            raise ValueError(f"input_size must be a power of two, got {s}")
        if s % (2**self.levels):
            raise ValueError(f"input_size {s} is not divisible by 2^levels = {2**self.levels}")
        if self.num_classes < 2 or self.cls_hidden < 1:
            raise ValueError("num_classes must be >= 2 and cls_hidden >= 1")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.levels - 1)

    def as_ints(self) -> list[int]:
        return [int(getattr(self, f.name)) for f in fields(self)]

    @classmethod
    def from_ints(cls, values: Iterable[int]) -> "UNetConfig":
        names = [f.name for f in fields(cls)]
        vals = list(values)
        if len(vals) != len(names):
            raise ValueError(f"expected {len(names)} config fields, got {len(vals)}")
        kw = dict(zip(names, vals))
        kw["upconv"] = bool(kw["upconv"])
        return cls(**kw)


def _param_specs(cfg: UNetConfig) -> list[tuple[str, str, tuple[int, ...], int]]:
    """(name, group, shape, fan_in) for every trainable tensor, in build order."""
    specs = []

    def conv(name, group, cin, cout, k):
        specs.append((f"{name}.weight", group, (cout, cin, k, k), cin * k * k))
        specs.append((f"{name}.bias", group, (cout,), 0))

    L = cfg.levels
    for lvl in range(L):
        cin = 1 if lvl == 0 else cfg.channels(lvl - 1)
        c = cfg.channels(lvl)
        conv(f"enc{lvl}.conv1", "encoder", cin, c, 3)
        conv(f"enc{lvl}.conv2", "encoder", c, c, 3)
    for lvl in range(L - 2, -1, -1):
        c, below = cfg.channels(lvl), cfg.channels(lvl + 1)
        if cfg.upconv:
            conv(f"dec{lvl}.up", "decoder", below, c, 3)
            cat = 2 * c
        else:
            cat = c + below
        conv(f"dec{lvl}.conv1", "decoder", cat, c, 3)
        conv(f"dec{lvl}.conv2", "decoder", c, c, 3)
    conv("dec.out", "decoder", cfg.channels(0), 1, 1)
    cb, h = cfg.bottleneck_channels, cfg.cls_hidden
    specs.append(("cls.fc1.weight", "cls", (cb, h), cb))
    specs.append(("cls.fc1.bias", "cls", (h,), 0))
    specs.append(("cls.fc2.weight", "cls", (h, cfg.num_classes), h))
    specs.append(("cls.fc2.bias", "cls", (cfg.num_classes,), 0))
    return specs


class MultitaskNet:
    def __init__(self, config: UNetConfig, params: dict[str, Tensor], groups: dict[str, list[str]]):
        self.config = config
        self.params = params
        self.groups = groups

    def group(self, name: str) -> list[Tensor]:
        return [self.params[n] for n in self.groups[name]]

    def parameters(self, groups: Iterable[str] = GROUPS) -> list[Tensor]:
        return [p for g in groups for p in self.group(g)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def snapshot(self, groups: Iterable[str] = GROUPS) -> dict[str, bytes]:
        return {n: self.params[n].data.tobytes() for g in groups for n in self.groups[g]}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _conv(self, x: Tensor, name: str, padding: int = 1) -> Tensor:
        p = nn.Conv2dParams(self.params[f"{name}.weight"], self.params[f"{name}.bias"], 1, padding)
        return nn.conv2d(x, p)

    def _check_input(self, x: Tensor) -> None:
        s = self.config.input_size
        if x.data.ndim != 4 or x.shape[1:] != (1, s, s):
            raise ValueError(f"expected input [B,1,{s},{s}], got {x.shape}")

    def encode(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        """Run the shared encoder; returns the per-level skips and the bottleneck map."""
        self._check_input(x)
        skips = []
        h = x
        L = self.config.levels
        for lvl in range(L):
            h = relu(self._conv(h, f"enc{lvl}.conv1"))
            h = relu(self._conv(h, f"enc{lvl}.conv2"))
            if lvl < L - 1:
                skips.append(h)
                h, _ = nn.max_pool2d(h, 2)
        return skips, h

    def decode(self, skips: list[Tensor], bottleneck: Tensor) -> Tensor:
        h = bottleneck
        for lvl in range(self.config.levels - 2, -1, -1):
            h = nn.upsample_nn(h, 2)
            if self.config.upconv:
                h = relu(self._conv(h, f"dec{lvl}.up"))
            h = nn.concat_channels(skips[lvl], h)
            h = relu(self._conv(h, f"dec{lvl}.conv1"))
            h = relu(self._conv(h, f"dec{lvl}.conv2"))
        return self._conv(h, "dec.out", padding=0)

    def classify(self, bottleneck: Tensor) -> Tensor:
        f = nn.global_avg_pool(bottleneck)
        p = self.params
        h = relu(nn.linear(f, p["cls.fc1.weight"], p["cls.fc1.bias"]))
        return nn.linear(h, p["cls.fc2.weight"], p["cls.fc2.bias"])

    def forward(self, x: Tensor, heads: Iterable[str] = ("depth", "cls")) -> tuple[Tensor | None, Tensor | None]:
        """One encoder pass feeding the requested heads; skipped heads come back as None."""
        heads = set(heads)
        unknown = heads - {"depth", "cls"}
        if unknown:
            raise ValueError(f"unknown heads {sorted(unknown)}")
        skips, bott = self.encode(x)
        depth = self.decode(skips, bott) if "depth" in heads else None
        logits = self.classify(bott) if "cls" in heads else None
        return depth, logits

    __call__ = forward

    def bottleneck_features(self, x: Tensor) -> Tensor:
        _, bott = self.encode(x)
        return nn.global_avg_pool(bott)


def build(config: UNetConfig, seed: int) -> MultitaskNet:
    """Instantiate the network with He-uniform weights drawn from ``seed``; biases start at zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    groups: dict[str, list[str]] = {g: [] for g in GROUPS}
    for name, group, shape, fan_in in _param_specs(config):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
        groups[group].append(name)
    return MultitaskNet(config, params, groups)


def forward(net: MultitaskNet, x: Tensor) -> tuple[Tensor, Tensor]:
    return net.forward(x)


def classification_bottleneck_features(net: MultitaskNet, x: Tensor) -> Tensor:
    return net.bottleneck_features(x)


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(shape)) for _, _, shape, _ in _param_specs(config))
