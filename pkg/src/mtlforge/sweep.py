"""Sweep planning, resumable cell execution and CSV/markdown reports.

A cell is one training run: (axis value, strategy, seed). Each finished cell
is flushed to ``<out>/cells/<key>.json`` where ``key`` hashes everything that
influences the result, so a restarted sweep skips finished cells and sweeps
sharing an output directory share cells.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from statistics import fmean

from . import data as D
from .config import ExperimentConfig, cell_key
from .data import Cohort
from .model import build
from .train import SPLITS, RunRecord, Trainer

log = logging.getLogger(__name__)

CSV_HEADER = ["axis", "seed", "strategy", "train_n", "snr", "epoch", "split", "accuracy", "depth_rmse", "cls_loss",
              "depth_loss"]


@dataclass(frozen=True)
class Cell:
    axis: str
    value: str
    strategy: str
    seed: int
    train_n: int
    snr: str

    def config(self, cfg: ExperimentConfig) -> ExperimentConfig:
        return replace(cfg, strategy=self.strategy, seeds=(self.seed,), train_n=self.train_n, snr=self.snr,
                       axis="none", values=())

    def payload(self, cfg: ExperimentConfig) -> dict:
        """Everything that determines the run's outcome."""
        hp = self.config(cfg).hyperparameters(self.seed)
        return {
            "hp": {**asdict(hp), "loss_weights": list(hp.loss_weights)},
            "unet": cfg.unet().as_ints(),
            "train_n": self.train_n,
            "snr": self.snr,
            "noise_seed": cfg.noise_seed,
        }

    def key(self, cfg: ExperimentConfig) -> str:
        return cell_key(self.payload(cfg))


def plan_cells(cfg: ExperimentConfig) -> list[Cell]:
    """Cells in report order: axis value, then strategy, then seed."""
    values = list(cfg.values) if cfg.axis != "none" else [""]
    cells = []
    for v in values:
        train_n, snr = cfg.train_n, cfg.snr
        if cfg.axis == "strategy":
            strategies = [v]
        else:
            strategies = [cfg.strategy]
            if cfg.baseline and cfg.strategy != "single_task":
                strategies.append("single_task")
        if cfg.axis == "train_n":
            train_n = int(v)
        elif cfg.axis == "snr":
            snr = D.NoiseSpec.parse(v).label
            v = snr
        for s in strategies:
            for seed in cfg.seeds:
                cells.append(Cell(cfg.axis, v, s, seed, train_n, snr))
    return cells


# data ------------------------------------------------------------------------

_MNIST: dict[str, dict] = {}
_COHORTS: dict[tuple, dict[str, Cohort]] = {}


def _mnist(cfg: ExperimentConfig) -> dict:
    directory = str(D.resolve_data_dir(cfg.data_dir or None))
    if directory not in _MNIST:
        _MNIST[directory] = D.load_mnist(directory)
    return _MNIST[directory]


def cache_dir(cfg: ExperimentConfig, snr: str, train_n: int) -> Path:
    tag = snr.replace(":", "-")
    return Path(cfg.out) / "data" / f"s{cfg.size}_snr{tag}_noise{cfg.noise_seed}_n{train_n}"


def generate_cohorts(cfg: ExperimentConfig, snr: str, train_n: int) -> dict[str, Cohort]:
    split = D.split_cohorts(train_n)
    return D.build_cohorts(_mnist(cfg), split, cfg.size, cfg.noise(snr))


def prepare_cohorts(cfg: ExperimentConfig, snr: str, train_n: int, write: bool = True) -> dict[str, Cohort]:
    """Load the XMN1 caches for this (size, snr, noise seed, N), generating them first if absent."""
    key = (str(cache_dir(cfg, snr, train_n)), cfg.data_dir)
    if key in _COHORTS:
        return _COHORTS[key]
    d = Path(key[0])
    paths = {name: d / f"{name}.xmn" for name in SPLITS}
    if all(p.exists() for p in paths.values()):
        cohorts = {name: D.read_cache(p, name) for name, p in paths.items()}
    else:
        cohorts = generate_cohorts(cfg, snr, train_n)
        if write:
            for name, c in cohorts.items():
                D.write_cache(paths[name], c)
    _COHORTS[key] = cohorts
    return cohorts


def cohorts_for(cfg: ExperimentConfig, cell: Cell, pool_n: int) -> dict[str, Cohort]:
    """Train cohort = first ``cell.train_n`` of a shared pool of ``pool_n``; noise is per index so this is exact."""
    base = prepare_cohorts(cfg, cell.snr, pool_n)
    out = dict(base)
    out["train"] = base["train"].subset(cell.train_n)
    return out


# execution -------------------------------------------------------------------


def cell_path(cfg: ExperimentConfig, cell: Cell) -> Path:
    return Path(cfg.out) / "cells" / f"{cell.key(cfg)}.json"


def load_cell(cfg: ExperimentConfig, cell: Cell) -> RunRecord | None:
    p = cell_path(cfg, cell)
    if not p.exists():
        return None
    return RunRecord.from_dict(json.loads(p.read_text())["record"])


def run_cell(cfg: ExperimentConfig, cell: Cell, pool_n: int | None = None) -> RunRecord:
    cohorts = cohorts_for(cfg, cell, pool_n or cell.train_n)
    ccfg = cell.config(cfg)
    tr = Trainer(build(ccfg.unet(), cell.seed), cohorts, ccfg.hyperparameters(cell.seed), eval_batch=cfg.eval_batch)
    rec = tr.run().record()
    doc = {"key": cell.key(cfg), "cell": asdict(cell), "payload": cell.payload(cfg), "record": rec.to_dict()}
    D._atomic_write(cell_path(cfg, cell), (json.dumps(doc, indent=1) + "\n").encode())
    return rec


def _worker(cfg: ExperimentConfig, cell: Cell, pool_n: int) -> tuple[Cell, RunRecord | None, str | None]:
    try:
        return cell, run_cell(cfg, cell, pool_n), None
    except Exception as e:  # reported per cell; the sweep continues
        return cell, None, f"{type(e).__name__}: {e}\n{traceback.format_exc()}"


@dataclass
class SweepResult:
    cells: list[Cell]
    records: dict[Cell, RunRecord]
    failures: dict[Cell, str]
    skipped: int = 0

    def completed(self) -> list[tuple[Cell, RunRecord]]:
        return [(c, self.records[c]) for c in self.cells if c in self.records]


def run_sweep(cfg: ExperimentConfig, progress=None) -> SweepResult:
    cells = plan_cells(cfg)
    records: dict[Cell, RunRecord] = {}
    failures: dict[Cell, str] = {}
    todo = []
    for c in cells:
        rec = load_cell(cfg, c)
        if rec is None:
            todo.append(c)
        else:
            records[c] = rec
    skipped = len(records)
    pools: dict[str, int] = {}
    for c in cells:
        pools[c.snr] = max(pools.get(c.snr, 0), c.train_n)
    # generate caches up front so workers only read them
    for snr, n in pools.items():
        if any(c.snr == snr for c in todo):
            prepare_cohorts(cfg, snr, n)

    def done(cell, rec, err):
        if err is None:
            records[cell] = rec
        else:
            failures[cell] = err
            log.error("cell %s failed: %s", cell, err.splitlines()[0])
        if progress:
            progress(cell, rec, err)

    workers = min(cfg.workers(), max(len(todo), 1))
    if workers <= 1:
        for c in todo:
            done(*_worker(cfg, c, pools[c.snr]))
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_worker, cfg, c, pools[c.snr]) for c in todo]
            for f in as_completed(futs):
                done(*f.result())
    return SweepResult(cells, records, failures, skipped)


# reports ---------------------------------------------------------------------


def csv_rows(results: list[tuple[Cell, RunRecord]]) -> list[list[str]]:
    rows = []
    for cell, rec in results:
        for e in rec.epochs:
            for split in SPLITS:
                m = e.metrics.get(split)
                if m is None:
                    continue
                rows.append([cell.axis, str(cell.seed), cell.strategy, str(cell.train_n), cell.snr, str(e.epoch), split,
                             repr(m.accuracy), repr(m.depth_rmse), repr(m.cls_loss), repr(m.depth_loss)])
    return rows


def render_csv(results: list[tuple[Cell, RunRecord]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(csv_rows(results))
    return buf.getvalue()


AXIS_LABELS = {"snr": "S:N", "train_n": "N", "strategy": "Training Strategy", "none": "Run"}


def summary_rows(results: list[tuple[Cell, RunRecord]]) -> tuple[list[int], list[dict]]:
    """One row per (axis value, strategy) with final test accuracy per seed and the mean."""
    seeds = sorted({c.seed for c, _ in results})
    rows: dict[tuple, dict] = {}
    for c, rec in results:
        row = rows.setdefault((c.value, c.strategy, c.train_n, c.snr),
                              {"value": c.value, "strategy": c.strategy, "train_n": c.train_n, "snr": c.snr, "acc": {}})
        row["acc"][c.seed] = rec.test.accuracy
    out = list(rows.values())
    for r in out:
        r["mean"] = fmean(r["acc"].values())
    return seeds, out


def render_markdown(results: list[tuple[Cell, RunRecord]], axis: str = "none") -> str:
    seeds, rows = summary_rows(results)
    head = ["S:N", "N", "Training Strategy"] + [f"seed {s}" for s in seeds] + ["Mean Test Accuracy"]
    lines = [f"# Sweep over {AXIS_LABELS.get(axis, axis)}", "", "| " + " | ".join(head) + " |",
             "|" + "|".join("---" for _ in head) + "|"]
    for r in rows:
        accs = [f"{r['acc'][s]:.3f}" if s in r["acc"] else "" for s in seeds]
        lines.append("| " + " | ".join([r["snr"], str(r["train_n"]), r["strategy"], *accs, f"{r['mean']:.3f}"]) + " |")
    return "\n".join(lines) + "\n"


def emit_report(results: list[tuple[Cell, RunRecord]], out_dir, axis: str | None = None,
                stem: str = "report") -> tuple[Path, Path]:
    if not results:
        raise ValueError("no records to report")
    out = Path(out_dir)
    axis = axis or results[0][0].axis
    csv_path, md_path = out / f"{stem}.csv", out / f"{stem}.md"
    D._atomic_write(csv_path, render_csv(results).encode())
    D._atomic_write(md_path, render_markdown(results, axis).encode())
    return csv_path, md_path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def mean_test_accuracy(results: list[tuple[Cell, RunRecord]]) -> dict[tuple[str, str], float]:
    """(axis value, strategy) -> mean final test accuracy over seeds."""
    _, rows = summary_rows(results)
    return {(r["value"], r["strategy"]): r["mean"] for r in rows}
