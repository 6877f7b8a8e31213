"""Train e2e, local_nobank and local_fba on one shipped config and print the comparison table.

    python scripts/ablation.py configs/detection.cfg --epochs 300 --seeds 0 1 2
"""
import argparse
import os
import statistics

from fba.cli import compare_runs, format_table, run_experiment
from fba.config import load_config

MODES = ("e2e", "local_nobank", "local_fba")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()

    base = os.path.splitext(os.path.basename(args.config))[0]
    metric = {m: [] for m in MODES}
    for seed in args.seeds:
        dirs = []
        for mode in MODES:
            over = [f"trainer.mode={mode}", f"trainer.seed={seed}", f"data.seed={seed}", *args.set]
            if args.epochs:
                over.append(f"trainer.epochs={args.epochs}")
            out = os.path.join(args.out, base, f"seed{seed}", mode)
            art = run_experiment(load_config(args.config, over), out)
            metric[mode].append(art.final["metric"])
            print(f"seed {seed} {mode:13s} {art.final['metric_name']} {art.final['metric']:.4f}", flush=True)
            dirs.append(out)
        print(format_table(compare_runs(dirs), art.final["metric_name"]))
    if len(args.seeds) > 1:
        for mode in MODES:
            print(f"median {mode:13s} {statistics.median(metric[mode]):.4f}")


if __name__ == "__main__":
    main()
