"""Command line: ``run``, ``compare``, ``gradcheck``, ``memcheck``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .config import ConfigError, RunConfig, build_task, load_config, resolved_text
from .tasks import gen_classification_data, gen_detection_data, gen_sr_data, load_cifar10_binary
from .tasks.data import DataFormatError, Dataset
from .trainer import DivergenceError, MemoryReport, Trainer, TrainerError, profile_step

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

METRIC_NAMES = {"classification": "accuracy", "detection": "f1", "super_resolution": "psnr"}


def metric_columns(kind: str) -> List[str]:
    return ["epoch", "split", "lr", "loss", "module_losses", METRIC_NAMES[kind], "peak_retained_elements"]


class CompareError(Exception):
    pass


@dataclass
class RunArtifacts:
    rows: List[Dict[str, object]]
    memory: MemoryReport
    final: Dict[str, object]
    resolved: str


# ---------------------------------------------------------------------------
# data


def _synthetic(cfg: RunConfig, n: int, seed: int) -> Dataset:
    t, dt = cfg.task, cfg.trainer.dtype
    if t.kind == "classification":
        return gen_classification_data(n, seed, t.num_classes, t.input_size, cfg.data.noise, dtype=dt)
    if t.kind == "detection":
        return gen_detection_data(n, seed, t.input_size, t.strides, dtype=dt)
    return gen_sr_data(n, seed, t.scale, t.hr_size, dtype=dt)


def load_data(cfg: RunConfig):
    """Returns (train, test); train may be a per-epoch callable."""
    d = cfg.data
    if d.source == "cifar10":
        train = load_cifar10_binary(d.path).astype(cfg.trainer.dtype)
        if d.test_path:
            test = load_cifar10_binary(d.test_path).astype(cfg.trainer.dtype)
        else:
            n = len(train)
            if n <= d.test_count:
                raise DataFormatError(f"{d.path}: {n} records cannot hold out {d.test_count} for testing")
            test = train.subset(np.arange(n - d.test_count, n))
            train = train.subset(np.arange(n - d.test_count))
        if len(train) > d.train_count:
            train = train.subset(np.arange(d.train_count))
        return train, test
    test = _synthetic(cfg, d.test_count, d.seed * 7919 + 1)
    if d.resample:
        return (lambda epoch: _synthetic(cfg, d.train_count, d.seed * 7919 + 1000 + epoch)), test
    return _synthetic(cfg, d.train_count, d.seed * 7919), test


# ---------------------------------------------------------------------------
# run


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_experiment(cfg: RunConfig, out_dir: Optional[str] = None, log=None) -> RunArtifacts:
    """Train to completion and write metrics.csv, memory.json, final.json, resolved.cfg."""
    out_dir = out_dir or cfg.out_dir
    task = build_task(cfg.task, cfg.backbone)
    train, test = load_data(cfg)
    trainer = Trainer(task, cfg.trainer)
    first = train(0) if callable(train) else train
    memory = profile_step(trainer.net, next(first.batches(cfg.trainer.batch_size)), cfg.trainer)

    metric = METRIC_NAMES[task.kind]
    rows: List[Dict[str, object]] = []
    epoch_peaks: List[int] = []
    orig_step = trainer.train_step

    def tracked_step(batch, lr):
        m = orig_step(batch, lr)
        epoch_peaks.append(m.peak_retained)
        return m

    trainer.train_step = tracked_step

    def on_epoch(epoch, row):
        r = {
            "epoch": epoch,
            "split": "test",
            "lr": row["lr"],
            "loss": row["loss"],
            "module_losses": ";".join(repr(v) for v in row["module_losses"]),
            metric: row.get("test_metric", float("nan")),
            "peak_retained_elements": max(epoch_peaks),
        }
        epoch_peaks.clear()
        rows.append(r)
        if log:
            log(f"epoch {epoch:4d}  lr {row['lr']:.3g}  loss {row['loss']:.4f}  {metric} {r[metric]:.4f}")

    trainer.fit(train, test, on_epoch=on_epoch, eval_every=cfg.eval_every)
    final = {
        "task": task.kind,
        "mode": cfg.trainer.mode,
        "K": trainer.net.K,
        "metric_name": metric,
        "metric": rows[-1][metric],
        "epochs": cfg.trainer.epochs,
    }
    resolved = resolved_text(cfg)
    os.makedirs(out_dir, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=metric_columns(task.kind), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write(buf.getvalue())
    with open(os.path.join(out_dir, "memory.json"), "w") as f:
        json.dump(memory.to_dict(), f, indent=2)
    with open(os.path.join(out_dir, "final.json"), "w") as f:
        json.dump(final, f, indent=2)
    with open(os.path.join(out_dir, "resolved.cfg"), "w") as f:
        f.write(resolved)
    return RunArtifacts(rows, memory, final, resolved)


def memcheck(cfg: RunConfig) -> MemoryReport:
    """Memory report for one step of the configured mode; parameters are not updated."""
    task = build_task(cfg.task, cfg.backbone)
    train, _ = load_data(cfg)
    first = train(0) if callable(train) else train
    trainer = Trainer(task, cfg.trainer)
    return profile_step(trainer.net, next(first.batches(cfg.trainer.batch_size)), cfg.trainer)


# ---------------------------------------------------------------------------
# compare


def read_run(path: str) -> Dict[str, object]:
    try:
        with open(os.path.join(path, "final.json")) as f:
            final = json.load(f)
        with open(os.path.join(path, "memory.json")) as f:
            memory = json.load(f)
    except (OSError, ValueError) as e:
        raise CompareError(f"{path}: not a complete run directory ({e})") from None
    return {"path": path, **final, "peak": memory["peak_retained_elements"]}


COMPARE_COLUMNS = ["run", "mode", "K", "metric", "peak_retained_elements", "memory_ratio"]


def compare_runs(paths: List[str]) -> List[Dict[str, object]]:
    """One row per run, in the given order; memory ratio is relative to the first."""
    if len(paths) < 2:
        raise CompareError("compare needs at least two runs (the first is the baseline)")
    runs = [read_run(p) for p in paths]
    kinds = {r["task"] for r in runs}
    if len(kinds) > 1:
        raise CompareError(f"runs mix tasks {sorted(kinds)}; compare one task at a time")
    base = runs[0]["peak"]
    return [{
        "run": os.path.basename(os.path.normpath(r["path"])),
        "mode": r["mode"],
        "K": r["K"],
        "metric": r["metric"],
        "peak_retained_elements": r["peak"],
        "memory_ratio": r["peak"] / base if base else float("nan"),
    } for r in runs]


def format_table(rows: List[Dict[str, object]], metric_name: str = "metric") -> str:
    header = [c if c != "metric" else metric_name for c in COMPARE_COLUMNS]
    body = [[r["run"], r["mode"], str(r["K"]), f"{r['metric']:.4f}", str(r["peak_retained_elements"]),
             f"{r['memory_ratio']:.3f}"] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(b) for b in body]) + "\n"


def rows_to_csv(rows: List[Dict[str, object]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fba", description="Local learning with a feature bank, on numpy.")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="train one configuration and write run artifacts")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides output.dir)")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--quiet", action="store_true")
    c = sub.add_parser("compare", help="tabulate finished runs; the first is the baseline")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--csv", help="also write the table as CSV here")
    g = sub.add_parser("gradcheck", help="finite-difference check of every autograd op")
    g.add_argument("--cases", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    m = sub.add_parser("memcheck", help="memory report for one step, no training")
    m.add_argument("config")
    m.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "gradcheck":
            from .autograd.gradcheck import main as gc_main
            return gc_main(args.cases, args.seed)
        if args.verb == "compare":
            rows = compare_runs(args.dirs)
            with open(os.path.join(args.dirs[0], "final.json")) as f:
                metric_name = json.load(f)["metric_name"]
            sys.stdout.write(format_table(rows, metric_name))
            if args.csv:
                with open(args.csv, "w") as f:
                    f.write(rows_to_csv(rows))
            return EXIT_OK
        cfg = load_config(args.config, args.set)
        if args.verb == "memcheck":
            print(json.dumps(memcheck(cfg).to_dict(), indent=2))
            return EXIT_OK
        log = None if args.quiet else (lambda s: print(s, flush=True))
        art = run_experiment(cfg, args.out, log)
        print(f"{art.final['metric_name']} {art.final['metric']:.4f}  "
              f"peak_retained_elements {art.memory.peak_retained_elements}")
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CompareError as e:
        print(f"compare error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataFormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except TrainerError as e:
        print(f"trainer error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
