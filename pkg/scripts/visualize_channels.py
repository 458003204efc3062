#!/usr/bin/env python3
"""Optimize images for a handful of channels of a checkpoint.

Fits the color decorrelation matrix from a synthetic style corpus (or a
dataset folder), optimizes each requested channel, and writes individual
PPMs, a contact sheet, and the objective traces.
"""

import argparse
import os
import sys

import ftscope.data as D
import ftscope.featviz as F
import ftscope.model as M
from ftscope.ppm import tile_grid, write_ppm


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("checkpoint")
    parser.add_argument("--layer", required=True)
    parser.add_argument("--channels", default="0,1,2,3",
                        help="comma-separated channel indices")
    parser.add_argument("--steps", type=int, default=F.DEFAULT_STEPS)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--dataset", default=None,
                        help="folder for the decorrelation fit (identity if omitted)")
    parser.add_argument("--data-seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    model = M.load_checkpoint(args.checkpoint)
    if args.dataset:
        dataset = D.load_folder(args.dataset, image_size=model.spec.input_size,
                                split_seed=args.data_seed)
        deco = F.fit_decorrelation(dataset, "train")
    else:
        deco = F.identity_decorrelation()

    os.makedirs(args.out, exist_ok=True)
    images = []
    for channel in (int(c) for c in args.channels.split(",")):
        result = F.optimize_channel(model, (args.layer, channel), deco,
                                    steps=args.steps, seed=args.seed)
        stem = f"{args.layer}_{channel}"
        write_ppm(os.path.join(args.out, f"{stem}.ppm"), result.image)
        result.write_trace(os.path.join(args.out, f"{stem}_trace.csv"))
        images.append(result.image)
        print(f"{stem}: objective {result.trace[0]:+.5g} -> {result.trace[-1]:+.5g}")
    write_ppm(os.path.join(args.out, f"{args.layer}_sheet.ppm"), tile_grid(images))
    print(f"wrote {len(images)} optimized images to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
