"""Command-line surface: generate / train / double-ft / compare / viz / topk.

Every command writes only under its --out directory and appends an entry to
that directory's manifest.json; `ftscope replay` re-executes a manifest
into a fresh directory, reproducing every artifact bitwise.  Exit codes:
0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from ftscope import data as D
from ftscope import featviz as F
from ftscope import metrics as X
from ftscope import model as M
from ftscope import training as Tr
from ftscope.ppm import tile_grid, write_ppm


class ConfigError(ValueError):
    """Bad flags or unusable inputs (exit code 2)."""


def worker_count() -> int:
    """Parallelism cap: FTSCOPE_THREADS when set, else the CPU count."""
    env = os.environ.get("FTSCOPE_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as e:
            raise ConfigError(f"FTSCOPE_THREADS must be an integer, got {env!r}") from e
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _append_manifest(out: str, command: str, argv: list, dataset_seeds: list,
                     checkpoints: list, outputs: list):
    path = os.path.join(out, "manifest.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
    else:
        manifest = {"run_id": "", "entries": []}
    manifest["entries"].append({
        "command": command,
        "argv": list(argv),
        "dataset_seeds": dataset_seeds,
        "checkpoints": checkpoints,
        "outputs": outputs,
    })
    digest = hashlib.sha256(json.dumps([e["argv"] for e in manifest["entries"]]).encode())
    manifest["run_id"] = digest.hexdigest()[:12]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)


# ---------------------------------------------------------------------------
# dataset and model resolution
# ---------------------------------------------------------------------------

def _resolve_dataset(args, spec: str | None = None) -> D.Dataset:
    name = spec if spec is not None else args.dataset
    if name is None:
        raise ConfigError("--dataset is required")
    cfg = D.SynthConfig(
        num_style_classes=args.classes,
        num_object_labels=args.labels,
        images_per_class=args.images_per_class,
        image_size=args.image_size,
        seed=args.data_seed,
    )
    if name == "synth:style":
        return D.generate_style_corpus(cfg)
    if name == "synth:object":
        style_cfg = replace(cfg, seed=args.style_seed) if args.style_seed is not None else None
        return D.generate_object_corpus(cfg, style_source=style_cfg)
    if name.startswith("synth:"):
        raise ConfigError(f"unknown synthetic dataset {name!r}; use synth:style or synth:object")
    if not os.path.isdir(name):
        raise ConfigError(f"dataset directory {name!r} does not exist")
    return D.load_folder(name, image_size=args.image_size, split_seed=args.data_seed)


def _head_for(dataset: D.Dataset) -> M.Head:
    kind = "sigmoid" if dataset.task == "object" else "softmax"
    return M.Head(kind, dataset.num_classes)


def _resolve_mode(args) -> Tr.TrainingMode:
    if getattr(args, "mode_config", None):
        try:
            mode = Tr.mode_from_config(args.mode_config)
        except (Tr.TrainingError, OSError) as e:
            raise ConfigError(f"bad mode config: {e}") from e
    else:
        mode = Tr.MODES[args.mode]
    if getattr(args, "epochs", None) is not None:
        mode = replace(mode, max_epochs=args.epochs)
    return mode


def _load_model(path: str) -> M.ModelCheckpoint:
    if not os.path.isdir(path):
        raise ConfigError(f"checkpoint directory {path!r} does not exist")
    return M.load_checkpoint(path)


def _prepare_model(args, dataset: D.Dataset) -> M.ModelCheckpoint:
    head = _head_for(dataset)
    if args.init:
        model = _load_model(args.init)
        if model.spec.head != head:
            model = M.replace_head(model, head, seed=args.seed)
        if args.mode == "scratch-top":
            n = Tr.MODES["scratch-top"].unfrozen
            names = [b.name for b in model.spec.blocks[-n:]]
            model = M.randomize_blocks(model, names, seed=args.seed)
        return model
    spec = M.default_spec(head, input_size=dataset.image_size, num_blocks=args.blocks)
    return M.build_model(spec, args.seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args, argv) -> int:
    dataset = _resolve_dataset(args)
    out_dir = os.path.join(args.out, "dataset")
    D.save_folder(dataset, out_dir)
    outputs = ["dataset/labels.csv"] + [f"dataset/{i}.ppm" for i in dataset.ids]
    _append_manifest(args.out, "generate", argv, [args.data_seed], [], outputs)
    print(f"wrote {len(dataset.ids)} images to {out_dir}")
    return 0


def cmd_train(args, argv) -> int:
    dataset = _resolve_dataset(args)
    mode = _resolve_mode(args)
    model = _prepare_model(args, dataset)
    ckpt, history = Tr.train(model, dataset, mode, args.seed)
    ckpt_dir = os.path.join(args.out, "checkpoint")
    M.save_checkpoint(ckpt, ckpt_dir)
    Tr.write_history(history, os.path.join(args.out, "history.csv"))
    _append_manifest(args.out, "train", argv, [args.data_seed],
                     ["checkpoint"], ["checkpoint/manifest.json", "checkpoint/params.bin",
                                      "history.csv"])
    print(f"checkpoint {M.checkpoint_id(ckpt)} at {ckpt_dir} "
          f"(selected epoch {history.selected_epoch})")
    return 0


def cmd_double_ft(args, argv) -> int:
    intermediate = _resolve_dataset(args, args.intermediate)
    target = _resolve_dataset(args)
    inter_mode = Tr.MODES[args.intermediate_mode]
    target_mode = _resolve_mode(args)
    model = _prepare_model(args, intermediate)
    # same staging as training.double_finetune, kept inline to emit histories
    stage1, hist1 = Tr.train(model, intermediate, inter_mode, args.seed)
    swapped = M.replace_head(stage1, _head_for(target), args.seed + 1)
    stage2, hist2 = Tr.train(swapped, target, target_mode, args.seed + 2)
    M.save_checkpoint(stage2, os.path.join(args.out, "checkpoint"))
    Tr.write_history(hist1, os.path.join(args.out, "history_intermediate.csv"))
    Tr.write_history(hist2, os.path.join(args.out, "history.csv"))
    _append_manifest(args.out, "double-ft", argv, [args.data_seed],
                     ["checkpoint"], ["checkpoint/manifest.json", "checkpoint/params.bin",
                                      "history_intermediate.csv", "history.csv"])
    print(f"double fine-tuned checkpoint {M.checkpoint_id(stage2)}")
    return 0


def _compare_layer_metrics(model_a, model_b, dataset, split, layers, k):
    """Per-layer CKA plus per-channel overlap/entropy, threaded per layer."""
    ids_a, feats_a = X.collect_features(model_a, dataset, split, layers)
    _, feats_b = X.collect_features(model_b, dataset, split, layers)
    labels = dataset.labels

    def one_layer(layer):
        cka = X.linear_cka(feats_a[layer], feats_b[layer])
        overlaps, entropies = [], []
        for c in range(feats_a[layer].shape[1]):
            before = X.topk_from_scores(ids_a, feats_a[layer][:, c], (layer, c), k)
            after = X.topk_from_scores(ids_a, feats_b[layer][:, c], (layer, c), k)
            overlaps.append(X.overlap_ratio(before, after))
            if dataset.task == "style":
                entropies.append(X.class_entropy(after, labels, dataset.num_classes).value)
        return cka, overlaps, entropies

    with ThreadPoolExecutor(max_workers=min(worker_count(), len(layers))) as pool:
        results = list(pool.map(one_layer, layers))
    return {layer: r for layer, r in zip(layers, results)}


def cmd_compare(args, argv) -> int:
    model_a = _load_model(args.model_a)
    model_b = _load_model(args.model_b)
    if not X._body_spec_matches(model_a.spec, model_b.spec):
        raise ConfigError("checkpoints have different body architectures")
    dataset = _resolve_dataset(args)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    known = {"cka", "l2", "overlap", "entropy"}
    unknown = set(metrics) - known
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {sorted(known)}")
    if "entropy" in metrics and dataset.task != "style":
        raise ConfigError("entropy requires a single-label (style) dataset")
    split = args.split
    layers = [l for l in M.canonical_layers(model_a.spec)
              if l in M.canonical_layers(model_b.spec)]
    os.makedirs(args.out, exist_ok=True)
    outputs = []

    per_layer = None
    if {"cka", "overlap", "entropy"} & set(metrics):
        per_layer = _compare_layer_metrics(model_a, model_b, dataset, split, layers, args.k)

    if "cka" in metrics:
        report = X.LayerReport("cka", [(l, per_layer[l][0]) for l in layers],
                               f"{M.checkpoint_id(model_a)}|{M.checkpoint_id(model_b)}",
                               f"{dataset.name}:{split}")
        report.to_csv(os.path.join(args.out, "cka.csv"))
        outputs.append("cka.csv")
    if "l2" in metrics:
        per_kernel, mean = X.kernel_l2(model_a, model_b)
        with open(os.path.join(args.out, "l2.csv"), "w", encoding="utf-8") as f:
            f.write("layer,value\n")
            for layer, value in per_kernel:
                f.write(f"{layer},{value:.12g}\n")
            f.write(f"mean,{mean:.12g}\n")
        outputs.append("l2.csv")
    for metric, column in (("overlap", 1), ("entropy", 2)):
        if metric not in metrics:
            continue
        raw_path = os.path.join(args.out, f"{metric}_channels.csv")
        summary_path = os.path.join(args.out, f"{metric}.csv")
        with open(raw_path, "w", encoding="utf-8") as f:
            f.write("layer,channel,value\n")
            for layer in layers:
                for c, v in enumerate(per_layer[layer][column]):
                    f.write(f"{layer},{c},{v:.12g}\n")
        with open(summary_path, "w", encoding="utf-8") as f:
            f.write("layer,min,q1,median,mean,q3,max\n")
            for layer in layers:
                s = X.distribution_summary(per_layer[layer][column])
                f.write(f"{layer},{s['min']:.12g},{s['q1']:.12g},{s['median']:.12g},"
                        f"{s['mean']:.12g},{s['q3']:.12g},{s['max']:.12g}\n")
        outputs.extend([f"{metric}_channels.csv", f"{metric}.csv"])
    _append_manifest(args.out, "compare", argv, [args.data_seed], [], outputs)
    print(f"wrote {', '.join(outputs)} to {args.out}")
    return 0


def _parse_channel(args, model) -> tuple:
    layers = M.canonical_layers(model.spec)
    if args.layer not in layers:
        raise ConfigError(f"unknown layer {args.layer!r}; known: {layers}")
    channels = M.block_channels(model.spec)[args.layer]
    if not 0 <= args.channel < channels:
        raise ConfigError(f"channel {args.channel} out of range; layer {args.layer} "
                          f"has {channels} channels")
    return (args.layer, args.channel)


def cmd_viz(args, argv) -> int:
    model = _load_model(args.model)
    channel = _parse_channel(args, model)
    if args.dataset:
        deco = F.fit_decorrelation(_resolve_dataset(args), "train")
    else:
        deco = F.identity_decorrelation()
    result = F.optimize_channel(model, channel, deco, steps=args.steps,
                                step_size=args.step_size, seed=args.seed)
    baseline = F.random_baseline(model, channel, deco, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    stem = f"{channel[0]}_{channel[1]}"
    write_ppm(os.path.join(args.out, f"{stem}.ppm"), result.image)
    result.write_trace(os.path.join(args.out, f"{stem}_trace.csv"))
    with open(os.path.join(args.out, f"{stem}_baseline.json"), "w", encoding="utf-8") as f:
        json.dump({"mean_random_objective": baseline,
                   "count": F.RANDOM_BASELINE_COUNT,
                   "final_objective": result.trace[-1]}, f, indent=1)
    outputs = [f"{stem}.ppm", f"{stem}_trace.csv", f"{stem}_baseline.json"]
    _append_manifest(args.out, "viz", argv, [args.data_seed], [], outputs)
    print(f"objective {result.trace[-1]:.6g} (baseline {baseline:.6g}) -> {stem}.ppm")
    return 0


def cmd_topk(args, argv) -> int:
    model = _load_model(args.model)
    channel = _parse_channel(args, model)
    dataset = _resolve_dataset(args)
    topk = X.topk_activations(model, dataset, args.split, channel, k=args.k)
    os.makedirs(args.out, exist_ok=True)
    stem = f"top{args.k}_{channel[0]}_{channel[1]}"
    csv_path = os.path.join(args.out, f"{stem}.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("rank,image_id,score,class\n")
        for rank, (image_id, score) in enumerate(topk.entries, start=1):
            label = dataset.labels[image_id]
            name = dataset.class_names[label] if dataset.task == "style" else \
                "+".join(n for n, v in zip(dataset.class_names, label) if v) or "none"
            f.write(f"{rank},{image_id},{score:.12g},{name}\n")
    sheet = tile_grid([dataset.images[i] for i in topk.ids()])
    write_ppm(os.path.join(args.out, f"{stem}.ppm"), sheet)
    _append_manifest(args.out, "topk", argv, [args.data_seed], [],
                     [f"{stem}.csv", f"{stem}.ppm"])
    print(f"wrote {stem}.csv and contact sheet for {len(topk.entries)} images")
    return 0


def cmd_replay(args, argv) -> int:
    with open(args.manifest, encoding="utf-8") as f:
        manifest = json.load(f)
    for entry in manifest["entries"]:
        sub_argv = list(entry["argv"])
        try:
            i = sub_argv.index("--out")
            sub_argv[i + 1] = args.out
        except ValueError:
            raise ConfigError(f"manifest entry for {entry['command']} lacks --out") from None
        code = main(sub_argv)
        if code != 0:
            return code
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_dataset_flags(p):
    p.add_argument("--dataset", help="dataset directory, synth:style, or synth:object")
    p.add_argument("--data-seed", type=int, default=0, help="dataset generation/split seed")
    p.add_argument("--classes", type=int, default=8, help="synthetic style classes")
    p.add_argument("--labels", type=int, default=4, help="synthetic object labels")
    p.add_argument("--images-per-class", type=int, default=40)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--style-seed", type=int, default=None,
                   help="style-source seed for synth:object backgrounds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ftscope",
        description="Train desk-scale Inception-style models and quantify how "
                    "fine-tuning changes them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus as PPM files + labels.csv")
    _add_dataset_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train or fine-tune a model")
    _add_dataset_flags(p)
    p.add_argument("--mode", choices=sorted(Tr.MODES), default="A")
    p.add_argument("--mode-config", help="key=value preset file overriding --mode")
    p.add_argument("--epochs", type=int, default=None, help="override the mode's epoch count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", help="checkpoint directory to start from")
    p.add_argument("--blocks", type=int, default=9, help="inception blocks for fresh models")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("double-ft", help="fine-tune on an intermediate dataset, then the target")
    _add_dataset_flags(p)
    p.add_argument("--intermediate", required=True,
                   help="intermediate dataset (dir or synth:style)")
    p.add_argument("--intermediate-mode", choices=sorted(Tr.MODES), default="A")
    p.add_argument("--mode", choices=sorted(Tr.MODES), default="A")
    p.add_argument("--mode-config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", help="checkpoint directory to start from")
    p.add_argument("--blocks", type=int, default=9)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_double_ft)

    p = sub.add_parser("compare", help="layer-wise CKA / l2 / overlap / entropy reports")
    p.add_argument("model_a")
    p.add_argument("model_b")
    _add_dataset_flags(p)
    p.add_argument("--split", default="test")
    p.add_argument("--metrics", default="cka,l2,overlap,entropy")
    p.add_argument("--k", type=int, default=100, help="top-K size for overlap/entropy")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("viz", help="optimize an image for a channel")
    p.add_argument("model")
    _add_dataset_flags(p)
    p.add_argument("--layer", required=True)
    p.add_argument("--channel", type=int, required=True)
    p.add_argument("--steps", type=int, default=F.DEFAULT_STEPS)
    p.add_argument("--step-size", type=float, default=F.DEFAULT_STEP_SIZE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("topk", help="maximal-activation set: CSV plus contact sheet")
    p.add_argument("model")
    _add_dataset_flags(p)
    p.add_argument("--split", default="train")
    p.add_argument("--layer", required=True)
    p.add_argument("--channel", type=int, required=True)
    p.add_argument("--k", type=int, default=100)
    p.set_defaults(fn=cmd_topk)
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-run a manifest into a new output directory")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_replay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    raw_argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        if hasattr(args, "out") and args.command != "replay":
            os.makedirs(args.out, exist_ok=True)
        return args.fn(args, raw_argv)
    except (ConfigError, D.DataError, M.SpecError, M.CheckpointError, X.MetricsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (Tr.TrainingError, F.FeatvizError, OSError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
