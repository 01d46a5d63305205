"""Flat ``key = value`` experiment configuration with '#' comments."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .data import TRAIN_MAX, NoiseSpec
from .model import UNetConfig
from .train import STRATEGIES, Hyperparameters

AXES = ("snr", "train_n", "strategy")
PAPER_SCALE = {"size": 256, "train_n": 5000}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None, source: str | None = None):
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        label = f"{prefix}: " if prefix else ""
        keypart = f"key '{key}': " if key else ""
        super().__init__(f"{label}{keypart}{message}")
        self.detail, self.key, self.line = message, key, line


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _parse_list(v: str, item) -> tuple:
    parts = [p.strip() for p in v.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a non-empty comma-separated list")
    return tuple(item(p) for p in parts)


def _snr(v: str) -> str:
    return NoiseSpec.parse(v).label


def _strategy(v: str) -> str:
    v = v.strip()
    if v not in STRATEGIES:
        raise ValueError(f"unknown strategy {v!r}; choose from {', '.join(STRATEGIES)}")
    return v


def _axis(v: str) -> str:
    v = v.strip()
    if v not in AXES + ("none",):
        raise ValueError(f"axis must be one of {', '.join(AXES)} or none")
    return v


@dataclass(frozen=True)
class ExperimentConfig:
    # optimisation
    learning_rate: float = 5e-5
    l2: float = 0.001
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 10
    strategy: str = "multi_optimizer"
    lambda_cls: float = 1.0
    lambda_depth: float = 1.0
    depth_mask: bool = False
    # data
    train_n: int = 512
    snr: str = "Inf"
    size: int = 32
    seeds: tuple[int, ...] = (0,)
    noise_seed: int = 0
    # architecture
    levels: int = 3
    base_channels: int = 8
    cls_hidden: int = 32
    upconv: bool = True
    # sweep
    axis: str = "none"
    values: tuple[str, ...] = ()
    baseline: bool = False  # add single-task cells next to every dMTL cell
    jobs: int = 0  # 0 = all available cores
    eval_batch: int = 100
    out: str = "runs"
    data_dir: str = ""

    def __post_init__(self):
        if self.axis != "none" and not self.values:
            raise ConfigError("sweep axis needs at least one value", "values")
        if not 1 <= self.train_n <= TRAIN_MAX:
            raise ConfigError(f"must be in [1, {TRAIN_MAX}]", "train_n")
        for v in self.values:
            try:
                _axis_value(self.axis, v)
            except ValueError as e:
                raise ConfigError(str(e), "values") from e
        if not self.seeds:
            raise ConfigError("at least one seed is required", "seeds")
        if self.jobs < 0 or self.eval_batch < 1:
            raise ConfigError("jobs must be >= 0 and eval_batch >= 1")
        try:
            self.hyperparameters(self.seeds[0])
            self.unet()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def hyperparameters(self, seed: int, strategy: str | None = None) -> Hyperparameters:
        return Hyperparameters(
            learning_rate=self.learning_rate, l2=self.l2, momentum=self.momentum, batch_size=self.batch_size,
            epochs=self.epochs, strategy=strategy or self.strategy, loss_weights=(self.lambda_cls, self.lambda_depth),
            seed=seed, depth_mask=self.depth_mask,
        )

    def unet(self) -> UNetConfig:
        return UNetConfig(self.levels, self.base_channels, self.size, 10, self.cls_hidden, self.upconv)

    def noise(self, snr: str | None = None) -> NoiseSpec:
        return NoiseSpec.parse(snr or self.snr, self.noise_seed)

    def workers(self) -> int:
        return self.jobs or (os.cpu_count() or 1)


def _axis_value(axis: str, v: str):
    if axis == "snr":
        return _snr(v)
    if axis == "train_n":
        n = int(v)
        if not 1 <= n <= TRAIN_MAX:
            raise ValueError(f"train_n value {n} outside [1, {TRAIN_MAX}]")
        return n
    if axis == "strategy":
        return _strategy(v)
    raise ValueError(f"values given but axis is {axis!r}")


PARSERS = {
    "learning_rate": float, "l2": float, "momentum": float, "batch_size": int, "epochs": int,
    "strategy": _strategy, "lambda_cls": float, "lambda_depth": float, "depth_mask": _parse_bool,
    "train_n": int, "snr": _snr, "size": int, "seeds": lambda v: _parse_list(v, int), "noise_seed": int,
    "levels": int, "base_channels": int, "cls_hidden": int, "upconv": _parse_bool,
    "axis": _axis, "values": lambda v: _parse_list(v, str.strip), "baseline": _parse_bool,
    "jobs": int, "eval_batch": int, "out": str.strip, "data_dir": str.strip,
}
ALIASES = {"lr": "learning_rate", "seed": "seeds", "batch": "batch_size", "n": "train_n"}
assert set(PARSERS) == {f.name for f in fields(ExperimentConfig)}


def parse_value(key: str, raw: str, line: int | None = None, source: str | None = None):
    key = ALIASES.get(key, key)
    if key not in PARSERS:
        raise ConfigError("unknown key", key, line, source)
    try:
        return key, PARSERS[key](raw)
    except ValueError as e:
        raise ConfigError(f"cannot parse {raw.strip()!r}: {e}", key, line, source) from e


def parse_text(text: str, source: str | None = None) -> dict:
    """Parse ``key = value`` lines; returns raw overrides keyed by field name."""
    out: dict = {}
    lines: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", None, n, source)
        k, v = (s.strip() for s in line.split("=", 1))
        key, val = parse_value(k, v, n, source)
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key, n, source)
        lines[key] = n
        out[key] = val
    out["_lines"] = lines
    return out


def parse_config(path: str | os.PathLike | None = None, overrides: dict | None = None,
                 paper_scale: bool = False) -> ExperimentConfig:
    """Defaults, then paper-scale profile, then file, then ``overrides`` (already typed)."""
    values: dict = {}
    lines: dict[str, int] = {}
    source = None
    if paper_scale:
        values.update(PAPER_SCALE)
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}", source=source) from e
        parsed = parse_text(text, source)
        lines = parsed.pop("_lines")
        values.update(parsed)
    values.update({ALIASES.get(k, k): v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except ConfigError as e:
        if e.key in lines and e.line is None:
            raise ConfigError(e.detail, e.key, lines[e.key], source) from e
        raise


def config_to_text(cfg: ExperimentConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"


def cell_key(payload: dict) -> str:
    """Stable short hash of a JSON-able cell description."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]

