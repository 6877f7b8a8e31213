"""Peak retained elements of one training step versus K, per mode.

    python scripts/memory_sweep.py --task classification --blocks 8 --width 16
"""
import argparse

from fba.blocks import BackboneSpec, StageSpec
from fba.tasks import (
    build_classification_task,
    build_detection_task,
    build_sr_task,
    gen_classification_data,
    gen_detection_data,
    gen_sr_data,
)
from fba.trainer import Network, TrainerConfig, profile_step

TASKS = {
    "classification": (build_classification_task, gen_classification_data),
    "detection": (build_detection_task, gen_detection_data),
    "super_resolution": (build_sr_task, gen_sr_data),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--task", choices=sorted(TASKS), default="classification")
    ap.add_argument("--blocks", type=int, default=8)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args()

    build, gen = TASKS[args.task]
    spec = None
    if args.task != "detection":
        spec = BackboneSpec((StageSpec(args.blocks, args.width, 1),))
    task = build(backbone_spec=spec)
    batch = next(gen(args.batch, 0).batches(args.batch))

    base = profile_step(Network(task, "e2e"), batch, TrainerConfig(mode="e2e")).peak_retained_elements
    print(f"{'mode':13s} {'K':>2s} {'peak':>10s} {'ratio':>6s} {'bank':>8s} {'boundary':>9s}")
    print(f"{'e2e':13s} {1:2d} {base:10d} {1.0:6.3f} {0:8d} {0:9d}")
    n = len(Network(task, "e2e").backbone.blocks)
    for mode in ("local_nobank", "local_fba"):
        for K in (k for k in (1, 2, 4, 8) if k <= n):
            r = profile_step(Network(task, mode, K), batch, TrainerConfig(mode=mode, K=K))
            print(f"{mode:13s} {K:2d} {r.peak_retained_elements:10d} {r.peak_retained_elements / base:6.3f} "
                  f"{r.bank_elements:8d} {r.boundary_elements:9d}")


if __name__ == "__main__":
    main()
