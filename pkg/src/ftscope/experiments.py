"""Desk-scale reproduction pipeline for the fine-tuning trend analyses.

One run: pretrain on style corpus variant A (the large-source analog),
fine-tune on variant B (different palettes and frequencies from the same
generator family), train from-scratch and partial-scratch references on B,
then transfer everything to the small multi-label object corpus.  The
resulting bundle carries every model and dataset the trend criteria need.
Epoch counts are the named presets' values divided by 4 (desk scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ftscope import data as D
from ftscope import metrics as X
from ftscope import model as M
from ftscope import training as Tr

FIRST_BLOCKS = ("mixed3a", "mixed3b", "mixed4a")
LAST_BLOCKS = ("mixed4e", "mixed5a", "mixed5b")
HIGH_BLOCKS = ("mixed5a", "mixed5b")


@dataclass(frozen=True)
class TrendConfig:
    seed: int = 0
    style_classes: int = 8
    images_per_class: int = 120
    object_labels: int = 4
    object_images_per_class: int = 60
    image_size: int = 32
    blocks: int = 9
    pretrain_epochs: int = 30
    finetune_epochs: int = 5    # mode A's 20 epochs / 4
    scratch_epochs: int = 50    # the from-scratch schemes' 200 epochs / 4
    object_epochs: int = 5


@dataclass
class TrendRun:
    config: TrendConfig
    style_a: D.Dataset
    style_b: D.Dataset
    objects: D.Dataset
    base: M.ModelCheckpoint          # pretrained on style A
    ft_init: M.ModelCheckpoint       # base with a fresh B head (fine-tune start)
    ft: M.ModelCheckpoint            # fine-tuned on style B (mode A analog)
    scratch_init: M.ModelCheckpoint  # random init of the from-scratch model
    scratch: M.ModelCheckpoint       # trained from scratch on style B
    partial_init: M.ModelCheckpoint  # base with randomized top blocks
    partial: M.ModelCheckpoint       # upper layers trained from scratch on B
    double_ft: M.ModelCheckpoint     # base -> B -> objects
    direct_ft: M.ModelCheckpoint     # base -> objects
    off_shelf: M.ModelCheckpoint     # frozen base body, new head on objects


def run_trend_experiment(config: TrendConfig) -> TrendRun:
    seed = config.seed
    style_a = D.generate_style_corpus(D.SynthConfig(
        num_style_classes=config.style_classes,
        images_per_class=config.images_per_class,
        image_size=config.image_size,
        seed=1000 + seed,
    ))
    style_b_cfg = D.SynthConfig(
        num_style_classes=config.style_classes,
        images_per_class=config.images_per_class,
        image_size=config.image_size,
        seed=2000 + seed,
    )
    style_b = D.generate_style_corpus(style_b_cfg)
    objects = D.generate_object_corpus(
        D.SynthConfig(
            num_style_classes=config.style_classes,
            num_object_labels=config.object_labels,
            images_per_class=config.object_images_per_class,
            image_size=config.image_size,
            seed=3000 + seed,
        ),
        style_source=style_b_cfg,
    )

    head_style = M.Head("softmax", config.style_classes)
    head_obj = M.Head("sigmoid", config.object_labels)
    spec = M.default_spec(head_style, input_size=config.image_size, num_blocks=config.blocks)

    pretrain_mode = replace(Tr.MODES["scratch-full"], max_epochs=config.pretrain_epochs)
    ft_mode = replace(Tr.MODES["A"], max_epochs=config.finetune_epochs)
    scratch_mode = replace(Tr.MODES["scratch-full"], max_epochs=config.scratch_epochs)
    partial_mode = replace(Tr.MODES["scratch-top"], max_epochs=config.scratch_epochs)
    obj_mode = replace(Tr.MODES["A"], max_epochs=config.object_epochs)
    off_shelf_mode = replace(obj_mode, unfrozen="none")

    base, _ = Tr.train(M.build_model(spec, seed), style_a, pretrain_mode, seed=seed)

    ft_init = M.replace_head(base, head_style, seed=seed + 1)
    ft, _ = Tr.train(ft_init, style_b, ft_mode, seed=seed + 2)

    scratch_init = M.build_model(spec, seed + 3)
    scratch, _ = Tr.train(scratch_init, style_b, scratch_mode, seed=seed + 4)

    top_names = [b.name for b in spec.blocks[-int(partial_mode.unfrozen):]]
    partial_init = M.randomize_blocks(M.replace_head(base, head_style, seed + 5),
                                      top_names, seed=seed + 5)
    partial, _ = Tr.train(partial_init, style_b, partial_mode, seed=seed + 6)

    double_ft, _ = Tr.train(M.replace_head(ft, head_obj, seed + 7), objects,
                            obj_mode, seed=seed + 8)
    direct_ft, _ = Tr.train(M.replace_head(base, head_obj, seed + 9), objects,
                            obj_mode, seed=seed + 10)
    off_shelf, _ = Tr.train(M.replace_head(base, head_obj, seed + 11), objects,
                            off_shelf_mode, seed=seed + 12)

    return TrendRun(
        config=config, style_a=style_a, style_b=style_b, objects=objects,
        base=base, ft_init=ft_init, ft=ft,
        scratch_init=scratch_init, scratch=scratch,
        partial_init=partial_init, partial=partial,
        double_ft=double_ft, direct_ft=direct_ft, off_shelf=off_shelf,
    )


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            r[order[i:j + 1]] = (i + j) / 2.0
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def depth_cka_curve(run: TrendRun, split: str = "test") -> X.LayerReport:
    """CKA between the fine-tune start point and the fine-tuned model."""
    return X.layerwise_cka(run.ft_init, run.ft, run.style_b, split)


def channel_overlaps(run: TrendRun, layers, k: int = 100,
                     split: str = "train") -> dict:
    """Per-channel top-k overlap between ft_init and ft, keyed by layer."""
    layers = list(layers)
    ids, before = X.collect_features(run.ft_init, run.style_b, split, layers)
    _, after = X.collect_features(run.ft, run.style_b, split, layers)
    out = {}
    for layer in layers:
        values = []
        for c in range(before[layer].shape[1]):
            b = X.topk_from_scores(ids, before[layer][:, c], (layer, c), k)
            a = X.topk_from_scores(ids, after[layer][:, c], (layer, c), k)
            values.append(X.overlap_ratio(b, a))
        out[layer] = values
    return out


def channel_entropies(run: TrendRun, model: M.ModelCheckpoint, layers,
                      k: int = 100, split: str = "train") -> dict:
    """Per-channel normalized class entropy of a model's top-k sets."""
    layers = list(layers)
    ids, feats = X.collect_features(model, run.style_b, split, layers)
    labels = run.style_b.labels
    out = {}
    for layer in layers:
        values = []
        for c in range(feats[layer].shape[1]):
            topk = X.topk_from_scores(ids, feats[layer][:, c], (layer, c), k)
            values.append(X.class_entropy(topk, labels, run.style_b.num_classes).value)
        out[layer] = values
    return out


def mean_overlap_by_block(run: TrendRun, blocks, k: int = 100,
                          split: str = "train") -> float:
    """Mean over channels of top-k overlap between ft_init and ft."""
    per = channel_overlaps(run, blocks, k, split)
    return float(np.mean([v for values in per.values() for v in values]))


def mean_entropy_by_block(run: TrendRun, model: M.ModelCheckpoint, blocks,
                          k: int = 100, split: str = "train") -> float:
    """Mean normalized class entropy of a model's top-k sets over blocks."""
    per = channel_entropies(run, model, blocks, k, split)
    return float(np.mean([v for values in per.values() for v in values]))


def test_map(model: M.ModelCheckpoint, dataset: D.Dataset, split: str = "test") -> float:
    ids = dataset.split_ids(split)
    probs, _ = M.forward(model, dataset.batch(ids))
    return X.mean_average_precision(probs, dataset.label_array(ids))


def test_top1(model: M.ModelCheckpoint, dataset: D.Dataset, split: str = "test") -> float:
    ids = dataset.split_ids(split)
    probs, _ = M.forward(model, dataset.batch(ids))
    return X.topk_accuracy(probs, dataset.label_array(ids), 1)


def ensemble_top1(models, dataset: D.Dataset, split: str = "test") -> float:
    ids = dataset.split_ids(split)
    probs = Tr.ensemble_predict(models, dataset.batch(ids))
    return X.topk_accuracy(probs, dataset.label_array(ids), 1)
