"""Finite-difference verification of every registered op and of the full network."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .model import UNetConfig, build
from .tensor import Tape, Tensor, backward, no_grad, numeric_grad, relative_error

TOLERANCE = 1e-4
H = 1e-5
NETWORK_CONFIG = UNetConfig(levels=2, base_channels=4, input_size=8, num_classes=10, cls_hidden=8)


def _away_from_zero(rng, shape, lo=0.05):
    """Values with |x| >= lo so relu kinks sit far outside the step h."""
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, gap=1e-2):
    """Shuffled values with pairwise gaps >= gap so max-pool winners are stable under +-h."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 4)).reshape(shape) - n * gap / 2


def _dims(rng, k, lo=1, hi=4):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=k))


# Each builder returns (fn, inputs): fn maps input tensors to one output tensor.
Case = tuple[Callable[..., Tensor], list[np.ndarray]]


def _case_binary(op):
    def make(rng) -> Case:
        shape = _dims(rng, rng.integers(1, 4))
        a = rng.normal(size=shape)
        if rng.random() < 0.25:
            b = rng.normal(size=())
        else:
            b = rng.normal(size=shape)
        return (lambda x, y: op(x, y)), [a, b]

    return make


def _case_relu(rng) -> Case:
    return (lambda x: T.relu(x)), [_away_from_zero(rng, _dims(rng, rng.integers(1, 4)))]


def _case_scale(rng) -> Case:
    s = float(rng.normal())
    return (lambda x: T.scale(x, s)), [rng.normal(size=_dims(rng, rng.integers(1, 4)))]


def _case_matmul(rng) -> Case:
    m, k, n = _dims(rng, 3, 1, 5)
    return (lambda a, b: T.matmul(a, b)), [rng.normal(size=(m, k)), rng.normal(size=(k, n))]


def _case_sum(rng) -> Case:
    return (lambda x: T.sum(x)), [rng.normal(size=_dims(rng, rng.integers(1, 4)))]


def _case_mean(rng) -> Case:
    return (lambda x: T.mean(x)), [rng.normal(size=_dims(rng, rng.integers(1, 4)))]


def _case_reshape(rng) -> Case:
    a, b, c = _dims(rng, 3)
    return (lambda x: T.reshape(x, (c, a * b))), [rng.normal(size=(a, b, c))]


def _case_conv2d(rng) -> Case:
    B, Cin, Cout = _dims(rng, 3, 1, 3)
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    H_, W_ = (int(d) for d in rng.integers(max(k, 2), 7, size=2))

    def fn(x, w, b):
        return nn.conv2d(x, nn.Conv2dParams(w, b, stride, pad))

    return fn, [rng.normal(size=(B, Cin, H_, W_)), rng.normal(size=(Cout, Cin, k, k)), rng.normal(size=(Cout,))]


def _case_max_pool(rng) -> Case:
    B, C = _dims(rng, 2, 1, 2)
    Hh, Wh = _dims(rng, 2, 1, 3)
    return (lambda x: nn.max_pool2d(x, 2)[0]), [_distinct(rng, (B, C, 2 * Hh, 2 * Wh))]


def _case_upsample(rng) -> Case:
    return (lambda x: nn.upsample_nn(x, 2)), [rng.normal(size=_dims(rng, 4, 1, 3))]


def _case_concat(rng) -> Case:
    B, C1, C2, H_, W_ = _dims(rng, 5, 1, 3)
    return (lambda a, b: nn.concat_channels(a, b)), [rng.normal(size=(B, C1, H_, W_)), rng.normal(size=(B, C2, H_, W_))]


def _case_slice(rng) -> Case:
    B, H_, W_ = _dims(rng, 3, 1, 3)
    C = int(rng.integers(2, 5))
    lo = int(rng.integers(0, C - 1))
    hi = int(rng.integers(lo + 1, C + 1))
    return (lambda x: nn.slice_channels(x, lo, hi)), [rng.normal(size=(B, C, H_, W_))]


def _case_gap(rng) -> Case:
    return (lambda x: nn.global_avg_pool(x)), [rng.normal(size=_dims(rng, 4, 1, 4))]


def _case_linear(rng) -> Case:
    B, i, o = _dims(rng, 3, 1, 5)
    return (lambda x, w, b: nn.linear(x, w, b)), [rng.normal(size=(B, i)), rng.normal(size=(i, o)), rng.normal(size=(o,))]


def _case_wce(rng) -> Case:
    B = int(rng.integers(1, 5))
    C = int(rng.integers(2, 7))
    y = rng.integers(0, C, size=B)
    w = rng.uniform(0.5, 2.0, size=C)
    return (lambda z: nn.weighted_cross_entropy(z, y, w)), [rng.normal(size=(B, C)) * 2]


def _case_mse(rng) -> Case:
    shape = (int(rng.integers(1, 3)), 1) + _dims(rng, 2, 1, 4)
    target = rng.normal(size=shape)
    mask = (rng.random(shape) < 0.5) if rng.random() < 0.5 else None
    return (lambda p: nn.mse_loss(p, target, mask)), [rng.normal(size=shape)]


# ops are looked up at call time so a patched module attribute is what gets checked
CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _case_binary(lambda a, b: T.add(a, b)),
    "sub": _case_binary(lambda a, b: T.sub(a, b)),
    "mul": _case_binary(lambda a, b: T.mul(a, b)),
    "relu": _case_relu,
    "scale": _case_scale,
    "matmul": _case_matmul,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "conv2d": _case_conv2d,
    "max_pool2d": _case_max_pool,
    "upsample_nn": _case_upsample,
    "concat_channels": _case_concat,
    "slice_channels": _case_slice,
    "global_avg_pool": _case_gap,
    "linear": _case_linear,
    "weighted_cross_entropy": _case_wce,
    "mse_loss": _case_mse,
}


def check_case(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
               h: float = H, max_coords: int | None = None) -> float:
    """Max relative error over all inputs of ``sum(fn(*inputs) * R)`` for a fixed random R."""
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    with no_grad():
        probe = fn(*ts)
    R = None if probe.size == 1 else Tensor(rng.normal(size=probe.shape))

    def scalar() -> Tensor:
        out = fn(*ts)
        return out if R is None else T.sum(T.mul(out, R))

    with Tape() as tape:
        loss = scalar()
    backward(tape, loss)

    def value() -> float:
        with no_grad():
            return scalar().item()

    worst = 0.0
    for t in ts:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        num = numeric_grad(value, t.data, h, coords)
        if coords is None:
            worst = max(worst, relative_error(analytic, num))
        else:
            worst = max(worst, relative_error(analytic.reshape(-1)[coords], num.reshape(-1)[coords]))
    return worst


def check_op(kind: str, cases: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, sum(map(ord, kind))])
    worst = 0.0
    for _ in range(cases):
        fn, inputs = CASES[kind](rng)
        worst = max(worst, check_case(fn, inputs, rng))
    return worst


def check_network(config: UNetConfig = NETWORK_CONFIG, coords: int = 32, seed: int = 0, batch: int = 2) -> float:
    """Gradient of CE + MSE w.r.t. a random subsample of all parameter coordinates."""
    rng = np.random.default_rng(seed)
    net = build(config, seed)
    S = config.input_size
    x = Tensor(rng.uniform(size=(batch, 1, S, S)))
    target = rng.uniform(size=(batch, 1, S, S))
    labels = rng.integers(0, config.num_classes, size=batch)
    # nonzero biases so no unit sits exactly on a relu kink
    for name, p in net.named_parameters():
        if name.endswith(".bias"):
            p.data = rng.normal(scale=0.1, size=p.shape)

    def loss() -> Tensor:
        depth, logits = net.forward(x)
        return T.add(nn.cross_entropy(logits, labels), nn.mse_loss(depth, target))

    with Tape() as tape:
        root = loss()
    backward(tape, root)
    named = net.named_parameters()
    sizes = np.array([p.size for _, p in named])
    flat_pick = rng.choice(int(sizes.sum()), size=coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for g in sorted(flat_pick):
        k = int(np.searchsorted(offsets, g, side="right") - 1)
        _, p = named[k]
        i = int(g - offsets[k])

        def value() -> float:
            with no_grad():
                return loss().item()

        numeric.append(numeric_grad(value, p.data, H, [i]).reshape(-1)[i])
        analytic.append(p.grad.reshape(-1)[i])
    return relative_error(np.array(analytic), np.array(numeric))


@dataclass
class SuiteResult:
    errors: dict[str, float]
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0

    def lines(self) -> list[str]:
        out = []
        for k, v in self.errors.items():
            status = "ok" if v < self.tolerance else "FAIL"
            out.append(f"{k:<24} worst rel err {v:.3e}  {status}")
        return out


def run_suite(cases: int = 100, seed: int = 0, network: bool = True, kinds: list[str] | None = None) -> SuiteResult:
    """One line per registered op kind, plus the full network."""
    registered = T.registered_ops()
    missing = [k for k in registered if k not in CASES]
    if missing:
        raise KeyError(f"no gradient-check case for registered ops: {missing}")
    errors: dict[str, float] = {}
    for kind in kinds or registered:
        try:
            errors[kind] = check_op(kind, cases, seed)
        except (FloatingPointError, ValueError) as e:
            print(f"{kind}: {e}", file=sys.stderr)
            errors[kind] = float("inf")
    if network:
        errors["network"] = check_network(seed=seed)
    return SuiteResult(errors)
