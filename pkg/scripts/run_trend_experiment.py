#!/usr/bin/env python3
"""Run the full fine-tuning trend experiment for one seed and emit reports.

Writes, under --out:
  cka.csv                 layer-wise CKA between fine-tune start and result
  overlap.csv             per-layer boxplot summary of top-K overlap ratios
  entropy.csv             per-layer class-entropy summary, before and after
  l2.csv                  mean kernel distances for the model pairs
  transfer.csv            object-task mAP of the three transfer strategies
  ensemble.csv            style top-1 of the members and their ensemble
plus the fine-tuned checkpoint under checkpoint/.
"""

import argparse
import csv
import os
import sys

import numpy as np

import ftscope.experiments as E
import ftscope.metrics as X
import ftscope.model as M


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--images-per-class", type=int, default=80)
    parser.add_argument("--pretrain-epochs", type=int, default=20)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    cfg = E.TrendConfig(seed=args.seed, images_per_class=args.images_per_class,
                        pretrain_epochs=args.pretrain_epochs)
    print(f"running trend experiment, seed {args.seed} ...", flush=True)
    run = E.run_trend_experiment(cfg)
    os.makedirs(args.out, exist_ok=True)

    curve = E.depth_cka_curve(run)
    curve.to_csv(os.path.join(args.out, "cka.csv"))
    values = curve.values()
    print(f"CKA depth slope: spearman {E.spearman(range(len(values)), values):+.3f}, "
          f"first-last {values[0] - values[-1]:+.3f}")

    layers = [b.name for b in run.ft.spec.blocks]
    overlaps = E.channel_overlaps(run, layers)
    with open(os.path.join(args.out, "overlap.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "min", "q1", "median", "mean", "q3", "max"])
        for layer in layers:
            s = X.distribution_summary(overlaps[layer])
            writer.writerow([layer] + [f"{s[k]:.6g}" for k in
                                       ("min", "q1", "median", "mean", "q3", "max")])

    ent_before = E.channel_entropies(run, run.ft_init, layers)
    ent_after = E.channel_entropies(run, run.ft, layers)
    with open(os.path.join(args.out, "entropy.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "mean_before_ft", "mean_after_ft"])
        for layer in layers:
            writer.writerow([layer, f"{np.mean(ent_before[layer]):.6g}",
                             f"{np.mean(ent_after[layer]):.6g}"])

    with open(os.path.join(args.out, "l2.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair", "mean_l2"])
        writer.writerow(["fine-tuned vs its init", f"{X.kernel_l2(run.ft, run.ft_init)[1]:.6g}"])
        writer.writerow(["from-scratch vs its init",
                         f"{X.kernel_l2(run.scratch, run.scratch_init)[1]:.6g}"])
        writer.writerow(["partial-scratch vs its init",
                         f"{X.kernel_l2(run.partial, run.partial_init)[1]:.6g}"])

    with open(os.path.join(args.out, "transfer.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "test_mAP"])
        writer.writerow(["off-the-shelf head", f"{E.test_map(run.off_shelf, run.objects):.4g}"])
        writer.writerow(["direct fine-tune", f"{E.test_map(run.direct_ft, run.objects):.4g}"])
        writer.writerow(["double fine-tune", f"{E.test_map(run.double_ft, run.objects):.4g}"])

    members = {"fine-tuned": run.ft, "partial-scratch": run.partial, "from-scratch": run.scratch}
    with open(os.path.join(args.out, "ensemble.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "test_top1"])
        for name, member in members.items():
            writer.writerow([name, f"{E.test_top1(member, run.style_b):.4g}"])
        writer.writerow(["ensemble of 3",
                         f"{E.ensemble_top1(list(members.values()), run.style_b):.4g}"])

    M.save_checkpoint(run.ft, os.path.join(args.out, "checkpoint"))
    print(f"reports written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
