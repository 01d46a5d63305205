"""SGD with momentum and the four training regimes: single task, sequential,
multiple optimizers and a combined multitask loss."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import Cohort
from .model import GROUPS, MultitaskNet
from .tensor import Tape, Tensor, add, backward, no_grad, scale

STRATEGIES = ("single_task", "sequential", "multi_optimizer", "multitask_loss")
SPLITS = ("train", "val", "test")

# optimizer name -> parameter groups it owns
OPTIMIZER_GROUPS = {
    "depth": ("encoder", "decoder"),
    "cls": ("encoder", "cls"),
    "joint": GROUPS,
}
STRATEGY_OPTIMIZERS = {
    "single_task": ("cls",),
    "sequential": ("depth", "cls"),
    "multi_optimizer": ("depth", "cls"),
    "multitask_loss": ("joint",),
}


@dataclass(frozen=True)
class Hyperparameters:
    learning_rate: float = 5e-5
    l2: float = 0.001
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 10
    strategy: str = "multi_optimizer"
    loss_weights: tuple[float, float] = (1.0, 1.0)  # (cls, depth)
    seed: int = 0
    depth_mask: bool = False  # restrict the depth loss to foreground pixels

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be >= 0, got {self.l2}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0:
            raise ValueError(f"loss_weights must be two non-negative numbers, got {self.loss_weights}")

    @property
    def total_epochs(self) -> int:
        return 2 * self.epochs if self.strategy == "sequential" else self.epochs

    def phase(self, epoch: int) -> str:
        """Phase tag of a 0-based epoch."""
        if self.strategy == "sequential":
            return "depth" if epoch < self.epochs else "cls"
        return self.strategy


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, named: list[tuple[str, Tensor]]) -> "SGDState":
        return cls({n: np.zeros_like(p.data) for n, p in named}, 0)


def sgd_step(named: list[tuple[str, Tensor]], state: SGDState, hp: Hyperparameters) -> None:
    """``v <- mu*v + (g + l2*w)``; ``w <- w - lr*v``, for every named parameter."""
    for name, p in named:
        if p.grad is None:
            raise ValueError(f"no gradient for parameter {name}")
        if p.grad.shape != p.data.shape:
            raise ValueError(f"gradient shape {p.grad.shape} does not match parameter {name} {p.data.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ValueError(f"velocity shape {v.shape} does not match parameter {name} {p.data.shape}")
        v = hp.momentum * v + (p.grad + hp.l2 * p.data)
        state.velocity[name] = v
        p.data = p.data - hp.learning_rate * v
    state.step += 1


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    depth_rmse: float
    cls_loss: float
    depth_loss: float
    correct: int = 0
    total: int = 0

    FIELDS = ("accuracy", "depth_rmse", "cls_loss", "depth_loss")

    def values(self) -> list[float]:
        return [self.accuracy, self.depth_rmse, self.cls_loss, self.depth_loss]


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    phase: str
    metrics: dict[str, Metrics]  # split -> metrics


@dataclass
class RunRecord:
    hp: Hyperparameters
    epochs: list[EpochRecord]
    test: Metrics
    seconds: float = 0.0
    best_epoch: int = 0
    best_val_accuracy: float = -1.0
    aborted: bool = False

    def to_dict(self) -> dict:
        return {
            "hp": {**asdict(self.hp), "loss_weights": list(self.hp.loss_weights)},
            "epochs": [
                {"epoch": e.epoch, "phase": e.phase, "metrics": {s: asdict(m) for s, m in e.metrics.items()}}
                for e in self.epochs
            ],
            "test": asdict(self.test),
            "seconds": self.seconds,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "aborted": self.aborted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        hp = Hyperparameters(**{**d["hp"], "loss_weights": tuple(d["hp"]["loss_weights"])})
        epochs = [
            EpochRecord(e["epoch"], e["phase"], {s: Metrics(**m) for s, m in e["metrics"].items()}) for e in d["epochs"]
        ]
        return cls(hp, epochs, Metrics(**d["test"]), d["seconds"], d["best_epoch"], d["best_val_accuracy"], d["aborted"])


def depth_loss(pred: Tensor, target: np.ndarray, masked: bool = False) -> Tensor:
    return nn.mse_loss(pred, target, (target > 0) if masked else None)


def evaluate(net: MultitaskNet, cohort: Cohort, class_weights: np.ndarray | None = None,
             batch_size: int = 100, depth_mask: bool = False) -> Metrics:
    """Accuracy, depth RMSE and both losses over a cohort, without touching parameters."""
    n = len(cohort)
    if n == 0:
        raise ValueError("cannot evaluate an empty cohort")
    w = np.ones(net.config.num_classes) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    wnll = np.empty(n)
    pred = np.empty(n, dtype=np.int64)
    sq = np.empty(n)
    sq_fg = np.empty(n)
    fg = np.empty(n)
    with no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            depth, logits = net.forward(Tensor(cohort.images[lo:hi]))
            y = cohort.labels[lo:hi]
            lsm = nn.log_softmax(logits.data)
            wnll[lo:hi] = -lsm[np.arange(hi - lo), y] * w[y]
            pred[lo:hi] = np.argmax(logits.data, axis=1)
            err = (depth.data - cohort.depths[lo:hi]) ** 2
            mask = cohort.depths[lo:hi] > 0
            sq[lo:hi] = err.reshape(hi - lo, -1).sum(axis=1)
            sq_fg[lo:hi] = (err * mask).reshape(hi - lo, -1).sum(axis=1)
            fg[lo:hi] = mask.reshape(hi - lo, -1).sum(axis=1)
    correct = int(np.sum(pred == cohort.labels))
    pixels = n * int(np.prod(cohort.depths.shape[1:]))
    mse = float(np.sum(sq)) / pixels
    dl = float(np.sum(sq_fg)) / max(float(np.sum(fg)), 1.0) if depth_mask else mse
    return Metrics(correct / n, math.sqrt(mse), float(np.sum(wnll)) / n, dl, correct, n)


class Trainer:
    """One training run. Call :meth:`run` (optionally in several slices) to advance.

    Shuffling depends only on ``(hp.seed, epoch)``, so a run resumed from a
    checkpoint at an epoch boundary replays the same batches.
    """

    def __init__(self, net: MultitaskNet, data: dict[str, Cohort], hp: Hyperparameters,
                 class_weights: np.ndarray | None = None, eval_batch: int = 100,
                 eval_splits: tuple[str, ...] = SPLITS):
        if len(data["train"]) == 0:
            raise ValueError("training cohort is empty")
        self.net = net
        self.data = data
        self.hp = hp
        self.eval_batch = eval_batch
        self.eval_splits = tuple(s for s in eval_splits if s in data)
        if class_weights is None:
            class_weights = nn.compute_class_weights(data["train"].label_histogram(net.config.num_classes))
        self.class_weights = np.asarray(class_weights, dtype=np.float64)
        self.states = {name: SGDState.for_params(self._named(name)) for name in STRATEGY_OPTIMIZERS[hp.strategy]}
        self.epoch = 0  # completed epochs
        self.history: list[EpochRecord] = []
        self.best_epoch = 0
        self.best_val_accuracy = -1.0
        self.best_params: dict[str, np.ndarray] = {}
        self.seconds = 0.0

    def _named(self, optimizer: str) -> list[tuple[str, Tensor]]:
        return [(n, self.net.params[n]) for g in OPTIMIZER_GROUPS[optimizer] for n in self.net.groups[g]]

    @property
    def done(self) -> bool:
        return self.epoch >= self.hp.total_epochs

    def batch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.hp.seed, epoch]).permutation(len(self.data["train"]))

    def _ce(self, logits: Tensor, y: np.ndarray) -> Tensor:
        return nn.weighted_cross_entropy(logits, y, self.class_weights)

    def step_task(self, task: str, x: Tensor, d: np.ndarray, y: np.ndarray) -> float:
        """Forward one head, backprop its loss, step that task's optimizer."""
        self.net.zero_grad()
        with Tape() as tape:
            depth, logits = self.net.forward(x, heads=(task,))
            loss = depth_loss(depth, d, self.hp.depth_mask) if task == "depth" else self._ce(logits, y)
        backward(tape, loss)
        sgd_step(self._named(task), self.states[task], self.hp)
        return loss.item()

    def step_joint(self, x: Tensor, d: np.ndarray, y: np.ndarray) -> float:
        lc, ld = self.hp.loss_weights
        self.net.zero_grad()
        with Tape() as tape:
            depth, logits = self.net.forward(x)
            total = add(scale(self._ce(logits, y), lc), scale(depth_loss(depth, d, self.hp.depth_mask), ld))
        backward(tape, total)
        sgd_step(self._named("joint"), self.states["joint"], self.hp)
        return total.item()

    def train_epoch(self, epoch: int) -> None:
        phase = self.hp.phase(epoch)
        tr = self.data["train"]
        order = self.batch_order(epoch)
        bs = self.hp.batch_size
        for lo in range(0, len(order), bs):
            idx = order[lo : lo + bs]
            x, d, y = Tensor(tr.images[idx]), tr.depths[idx], tr.labels[idx]
            if phase in ("single_task", "cls"):
                self.step_task("cls", x, d, y)
            elif phase == "depth":
                self.step_task("depth", x, d, y)
            elif phase == "multi_optimizer":
                self.step_task("depth", x, d, y)
                self.step_task("cls", x, d, y)
            else:
                self.step_joint(x, d, y)

    def evaluate(self, split: str) -> Metrics:
        return evaluate(self.net, self.data[split], self.class_weights, self.eval_batch, self.hp.depth_mask)

    def run(self, until: int | None = None) -> "Trainer":
        """Train up to ``until`` completed epochs (default: all)."""
        stop = self.hp.total_epochs if until is None else min(until, self.hp.total_epochs)
        while self.epoch < stop:
            t0 = time.perf_counter()
            self.train_epoch(self.epoch)
            metrics = {s: self.evaluate(s) for s in self.eval_splits}
            self.history.append(EpochRecord(self.epoch + 1, self.hp.phase(self.epoch), metrics))
            val = metrics.get("val")
            if val is not None and val.accuracy > self.best_val_accuracy:
                self.best_val_accuracy = val.accuracy
                self.best_epoch = self.epoch + 1
                self.best_params = {n: p.data.copy() for n, p in self.net.params.items()}
            self.epoch += 1
            self.seconds += time.perf_counter() - t0
        return self

    def record(self) -> RunRecord:
        if not self.history:
            raise RuntimeError("no epochs have run")
        last = self.history[-1].metrics
        test = last["test"] if "test" in last else self.evaluate("test")
        return RunRecord(self.hp, list(self.history), test, self.seconds, self.best_epoch, self.best_val_accuracy,
                         aborted=not self.done)


def train(net: MultitaskNet, data: dict[str, Cohort], hp: Hyperparameters, **kw) -> RunRecord:
    return Trainer(net, data, hp, **kw).run().record()


def _strategy_entry(strategy: str):
    def fn(net: MultitaskNet, data: dict[str, Cohort], hp: Hyperparameters, **kw) -> RunRecord:
        if hp.strategy != strategy:
            raise ValueError(f"hyperparameters select {hp.strategy!r}, expected {strategy!r}")
        return train(net, data, hp, **kw)

    fn.__name__ = f"train_{strategy}"
    return fn


train_single_task = _strategy_entry("single_task")
train_sequential = _strategy_entry("sequential")
train_multi_optimizer = _strategy_entry("multi_optimizer")
train_multitask_loss = _strategy_entry("multitask_loss")
