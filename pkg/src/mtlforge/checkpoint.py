"""MTLC checkpoint format.

Layout (little-endian)::

    b"MTLC" | version u32 | UNetConfig fields as u32 (declaration order)
    | tensor count u32 | per tensor: name_len u16, name utf-8, rank u8, dims u32*rank, f64 data

Parameters, optimizer velocities, counters and run history are all stored as
named float64 tensors, so the container needs no other record types.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import _atomic_write
from .model import MultitaskNet, UNetConfig, _param_specs
from .train import EpochRecord, Metrics, SGDState, Trainer

MAGIC = b"MTLC"
VERSION = 1
N_CONFIG = len(fields(UNetConfig))


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: UNetConfig
    tensors: dict[str, np.ndarray]
    version: int = VERSION

    @property
    def epoch(self) -> int:
        return int(self.tensors["meta/epoch"][0])

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}

    def optimizer_states(self) -> dict[str, SGDState]:
        states: dict[str, SGDState] = {}
        for k, v in self.tensors.items():
            if not k.startswith("opt/"):
                continue
            _, opt, rest = k.split("/", 2)
            st = states.setdefault(opt, SGDState())
            if rest == "step":
                st.step = int(v[0])
            else:
                st.velocity[rest] = v.copy()
        return states


def encode(config: UNetConfig, tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack(f"<{N_CONFIG}I", *config.as_ints())]
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF or a.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def decode(buf: bytes, config: UNetConfig | None = None) -> Checkpoint:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not an MTLC checkpoint")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    try:
        stored = UNetConfig.from_ints(struct.unpack(f"<{N_CONFIG}I", take(4 * N_CONFIG, "config")))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"invalid config in checkpoint header: {e}") from e
    if config is not None and stored != config:
        raise CheckpointError(f"checkpoint config {stored} does not match expected {config}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = take(nlen, f"tensor {i} name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * n, f"{name} data"), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last tensor")
    expected = {n: shape for n, _, shape, _ in _param_specs(stored)}
    for name, arr in tensors.items():
        if name.startswith("param/"):
            want = expected.get(name[6:])
            if want is None:
                raise CheckpointError(f"unknown parameter {name[6:]!r} for config {stored}")
            if arr.shape != want:
                raise CheckpointError(f"shape mismatch for {name[6:]}: stored {arr.shape}, config needs {want}")
    return Checkpoint(stored, tensors, version)


def state_tensors(net: MultitaskNet, states: dict[str, SGDState], epoch: int, seed: int = 0,
                  extra: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    t: dict[str, np.ndarray] = {}
    for name, p in net.named_parameters():
        t[f"param/{name}"] = p.data
    for opt, st in states.items():
        for name, v in st.velocity.items():
            t[f"opt/{opt}/{name}"] = v
        t[f"opt/{opt}/step"] = np.array([float(st.step)])
    t["meta/epoch"] = np.array([float(epoch)])
    t["meta/seed"] = np.array([float(seed)])
    t.update(extra or {})
    return t


def save_checkpoint(path, net: MultitaskNet, states: dict[str, SGDState], epoch: int, seed: int = 0,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    _atomic_write(Path(path), encode(net.config, state_tensors(net, states, epoch, seed, extra)))


def load_checkpoint(path, config: UNetConfig | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), config)


# trainer state ---------------------------------------------------------------


def trainer_extra(tr: Trainer) -> dict[str, np.ndarray]:
    """Run history and best-validation snapshot as tensors."""
    extra: dict[str, np.ndarray] = {}
    if tr.history:
        hist = np.array([[e.metrics[s].values() + [e.metrics[s].correct, e.metrics[s].total] for s in tr.eval_splits]
                         for e in tr.history])
        extra["hist/metrics"] = hist
    extra["meta/seconds"] = np.array([tr.seconds])
    extra["meta/best_epoch"] = np.array([float(tr.best_epoch)])
    extra["meta/best_val_accuracy"] = np.array([tr.best_val_accuracy])
    for name, arr in tr.best_params.items():
        extra[f"best/{name}"] = arr
    return extra


def save_trainer(path, tr: Trainer) -> None:
    save_checkpoint(path, tr.net, tr.states, tr.epoch, tr.hp.seed, trainer_extra(tr))


def restore_trainer(tr: Trainer, ck: Checkpoint) -> Trainer:
    """Load parameters, optimizer state and history from ``ck`` into a fresh trainer."""
    if ck.config != tr.net.config:
        raise CheckpointError(f"checkpoint config {ck.config} does not match the network {tr.net.config}")
    if int(ck.tensors["meta/seed"][0]) != tr.hp.seed:
        raise CheckpointError("checkpoint seed does not match the run's seed")
    params = ck.params()
    if set(params) != set(tr.net.params):
        raise CheckpointError("checkpoint parameter set does not match the network")
    for name, arr in params.items():
        tr.net.params[name].data = arr.copy()
    states = ck.optimizer_states()
    if set(states) != set(tr.states):
        raise CheckpointError(f"checkpoint optimizers {sorted(states)} do not match strategy {tr.hp.strategy}")
    tr.states = states
    tr.epoch = ck.epoch
    tr.seconds = float(ck.tensors["meta/seconds"][0])
    tr.best_epoch = int(ck.tensors["meta/best_epoch"][0])
    tr.best_val_accuracy = float(ck.tensors["meta/best_val_accuracy"][0])
    tr.best_params = {k[5:]: v.copy() for k, v in ck.tensors.items() if k.startswith("best/")}
    tr.history = []
    hist = ck.tensors.get("hist/metrics")
    if hist is not None:
        for i, row in enumerate(hist):
            ms = {s: Metrics(*map(float, row[j][:4]), int(row[j][4]), int(row[j][5])) for j, s in enumerate(tr.eval_splits)}
            tr.history.append(EpochRecord(i + 1, tr.hp.phase(i), ms))
    if len(tr.history) != tr.epoch:
        raise CheckpointError(f"checkpoint history has {len(tr.history)} epochs but epoch counter is {tr.epoch}")
    return tr

