"""``mtlforge`` command line: gen-data, train, sweep, report, grad-check.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ck
from . import data as D
from . import gradcheck, sweep
from .config import AXES, ConfigError, ExperimentConfig, parse_config
from .model import build
from .train import STRATEGIES, Trainer

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = Parser(add_help=False)
    g = p.add_argument_group("experiment")
    g.add_argument("--config", metavar="PATH", help="key=value config file")
    g.add_argument("--out", metavar="DIR", help="output directory (default: runs)")
    g.add_argument("--seed", metavar="INT", type=int, action="append", help="training seed; repeat for several")
    g.add_argument("--snr", metavar="LABEL", help="noise level, 'Inf' or 'a:b'")
    g.add_argument("--train-n", metavar="INT", type=int, help="training cohort size")
    g.add_argument("--strategy", choices=STRATEGIES)
    g.add_argument("--size", metavar="INT", type=int, help="image side length")
    g.add_argument("--epochs", metavar="INT", type=int)
    g.add_argument("--lr", metavar="FLOAT", type=float, help="learning rate")
    g.add_argument("--paper-scale", action="store_true", help="256x256 images and N=5000")
    g.add_argument("--jobs", metavar="INT", type=int, help="parallel sweep workers (0 = all cores)")
    g.add_argument("--data-dir", metavar="DIR", help="IDX directory (overrides MTLFORGE_DATA)")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> Parser:
    common = _common()
    parser = Parser(prog="mtlforge", description="Depth-augmented MNIST multitask experiments.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="build and cache the train/val/test cohorts")
    t = sub.add_parser("train", parents=[common], help="train one run, checkpointing every epoch")
    t.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.mtlc")
    t.add_argument("--stop-after", metavar="EPOCHS", type=int, help="stop once this many epochs are complete")
    s = sub.add_parser("sweep", parents=[common], help="run every cell of a sweep (resumable)")
    for sp in (s, sub.add_parser("report", parents=[common], help="rebuild the CSV/markdown report")):
        sp.add_argument("--axis", choices=AXES + ("none",))
        sp.add_argument("--values", metavar="LIST", help="comma-separated axis values")
        sp.add_argument("--baseline", action="store_true", help="add single-task cells to a dMTL sweep")
    gc = sub.add_parser("grad-check", help="finite-difference check of every op and the network")
    gc.add_argument("--cases", type=int, default=100, help="random cases per op")
    gc.add_argument("--seed", type=int, default=0)
    return parser


def load_config(args) -> ExperimentConfig:
    overrides = {
        "out": args.out,
        "seeds": tuple(args.seed) if args.seed else None,
        "snr": args.snr,
        "train_n": args.train_n,
        "strategy": args.strategy,
        "size": args.size,
        "epochs": args.epochs,
        "learning_rate": args.lr,
        "jobs": args.jobs,
        "data_dir": args.data_dir,
    }
    if getattr(args, "axis", None):
        overrides["axis"] = args.axis
    if getattr(args, "values", None):
        overrides["values"] = tuple(v.strip() for v in args.values.split(",") if v.strip())
    if getattr(args, "baseline", False):
        overrides["baseline"] = True
    if overrides["snr"] is not None:
        try:
            overrides["snr"] = D.NoiseSpec.parse(overrides["snr"]).label
        except ValueError as e:
            raise ConfigError(str(e), "snr") from e
    return parse_config(args.config, overrides, paper_scale=args.paper_scale)


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    cohorts = sweep.prepare_cohorts(cfg, cfg.snr, cfg.train_n)
    where = sweep.cache_dir(cfg, cfg.snr, cfg.train_n)
    print(f"cohorts at {where} (S={cfg.size}, S:N={cfg.snr}, noise seed {cfg.noise_seed})")
    for name, c in cohorts.items():
        hist = c.label_histogram()
        print(f"{name:<5} {len(c):>6} samples  labels {' '.join(str(int(h)) for h in hist)}  (sum {int(hist.sum())})")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, resume: bool, stop_after: int | None) -> int:
    seed = cfg.seeds[0]
    out = Path(cfg.out)
    cohorts = sweep.prepare_cohorts(cfg, cfg.snr, cfg.train_n)
    hp = cfg.hyperparameters(seed)
    tr = Trainer(build(cfg.unet(), seed), cohorts, hp, eval_batch=cfg.eval_batch)
    ckpt = out / "checkpoint.mtlc"
    if resume:
        if not ckpt.exists():
            raise FileNotFoundError(f"no checkpoint to resume at {ckpt}")
        ck.restore_trainer(tr, ck.load_checkpoint(ckpt, cfg.unet()))
        print(f"resumed at epoch {tr.epoch}/{hp.total_epochs}")
    target = hp.total_epochs if stop_after is None else min(stop_after, hp.total_epochs)
    while tr.epoch < target:
        tr.run(tr.epoch + 1)
        e = tr.history[-1]
        parts = "  ".join(f"{s} acc {m.accuracy:.4f} rmse {m.depth_rmse:.4f}" for s, m in e.metrics.items())
        print(f"epoch {e.epoch:>3} [{e.phase}]  {parts}", flush=True)
        ck.save_trainer(ckpt, tr)
    if not tr.done:
        print(f"stopped after epoch {tr.epoch}; continue with --resume")
        return EXIT_OK
    rec = tr.record()
    cell = sweep.Cell("none", "", hp.strategy, seed, cfg.train_n, cfg.snr)
    D._atomic_write(out / "record.json", (json.dumps(rec.to_dict(), indent=1) + "\n").encode())
    csv_path, md_path = sweep.emit_report([(cell, rec)], out, "none", stem="train")
    print(f"final test accuracy {rec.test.accuracy:.4f}; best val {rec.best_val_accuracy:.4f} at epoch {rec.best_epoch}")
    print(f"wrote {ckpt}, {csv_path}, {md_path}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig) -> int:
    if cfg.axis == "none":
        raise UsageError("sweep needs an axis (--axis snr|train_n|strategy with --values, or axis/values in --config)")
    cells = sweep.plan_cells(cfg)
    print(f"{len(cells)} cells over {cfg.axis}; output in {cfg.out}", flush=True)

    def progress(cell, rec, err):
        tag = f"{cell.value} {cell.strategy} seed {cell.seed}"
        if err:
            print(f"FAILED {tag}: {err.splitlines()[0]}", flush=True)
        else:
            print(f"done   {tag}: test acc {rec.test.accuracy:.4f} ({rec.seconds:.0f}s)", flush=True)

    res = sweep.run_sweep(cfg, progress)
    if res.skipped:
        print(f"{res.skipped} cells already complete, skipped")
    done = res.completed()
    if done:
        csv_path, md_path = sweep.emit_report(done, cfg.out, cfg.axis)
        print(Path(md_path).read_text())
        print(f"wrote {csv_path} and {md_path}")
    if res.failures:
        print(f"{len(res.failures)} cells failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig) -> int:
    cells = sweep.plan_cells(cfg)
    done = [(c, r) for c in cells if (r := sweep.load_cell(cfg, c)) is not None]
    if not done:
        raise FileNotFoundError(f"no finished cells for this configuration under {cfg.out}/cells")
    missing = len(cells) - len(done)
    csv_path, md_path = sweep.emit_report(done, cfg.out, cfg.axis)
    print(Path(md_path).read_text())
    print(f"wrote {csv_path} and {md_path}" + (f" ({missing} cells still missing)" if missing else ""))
    return EXIT_OK


def cmd_grad_check(cases: int, seed: int) -> int:
    res = gradcheck.run_suite(cases=cases, seed=seed)
    for line in res.lines():
        print(line)
    if res.failures:
        print(f"FAILED: {', '.join(res.failures)}")
        return EXIT_RUNTIME
    print(f"all {len(res.errors)} checks below {res.tolerance:g}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "grad-check":
            return cmd_grad_check(args.cases, args.seed)
        cfg = load_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume, args.stop_after)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_report(cfg)
    except (ConfigError, UsageError) as e:
        print(f"mtlforge {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, D.DataError, ck.CheckpointError, OSError) as e:
        print(f"mtlforge {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
