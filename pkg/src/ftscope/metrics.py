"""Quantitative instruments: linear CKA, kernel l2 distance, top-K
maximal-activation sets, overlap ratio, normalized class entropy, top-k
accuracy and mean average precision.

All functions are pure; rankings break ties by ascending image id (or row
index where ids are not part of the signature) so every result is
deterministic and testable.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

import ftscope.tensor as T
from ftscope import model as M
from ftscope.data import Dataset

FEATURE_BATCH = 64


class MetricsError(ValueError):
    """Degenerate or mismatched metric inputs."""


@dataclass
class FeatureMatrix:
    values: np.ndarray   # [N examples, C channels], globally average-pooled
    layer: str
    source: str          # checkpoint id

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2:
            raise MetricsError(f"feature matrix needs [N>=2, C], got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise MetricsError("feature matrix contains non-finite values")
        self.values = v


@dataclass
class TopKSet:
    channel: tuple            # (layer, index)
    entries: list             # [(image id, score)], scores non-increasing
    k: int

    def ids(self):
        return [i for i, _ in self.entries]

    def to_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["rank", "image_id", "score"])
            for rank, (image_id, score) in enumerate(self.entries, start=1):
                writer.writerow([rank, image_id, f"{score:.12g}"])


@dataclass
class EntropyReport:
    p: dict                   # class -> fraction of the set
    num_classes: int
    max_entropy: float
    value: float              # normalized entropy in [0, 1]


@dataclass
class LayerReport:
    metric: str
    entries: list             # [(layer, value)] in canonical order
    models: str
    dataset: str

    def values(self):
        return [v for _, v in self.entries]

    def to_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["layer", "value"])
            for layer, value in self.entries:
                writer.writerow([layer, f"{value:.12g}"])

    def to_json(self, path: str):
        payload = {"metric": self.metric, "models": self.models, "dataset": self.dataset,
                   "layers": [{"layer": l, "value": v} for l, v in self.entries]}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=1)


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------

def collect_features(model: M.ModelCheckpoint, dataset: Dataset, split: str,
                     layers) -> tuple:
    """Globally average-pooled post-activation features per layer.

    Returns (ids, {layer: [N, C]}) over the split in ascending-id order.
    """
    layers = list(layers)
    order = M.canonical_layers(model.spec)
    unknown = set(layers) - set(order)
    if unknown:
        raise MetricsError(f"unknown layer(s) {sorted(unknown)}")
    ids = dataset.split_ids(split)
    if not ids:
        raise MetricsError(f"split {split!r} is empty")
    deepest = max(layers, key=order.index)
    feats = {l: [] for l in layers}
    for start in range(0, len(ids), FEATURE_BATCH):
        chunk = ids[start:start + FEATURE_BATCH]
        x = T.Tensor(dataset.batch(chunk))
        out = M.run_graph(model.spec, {k: T.Tensor(v) for k, v in model.params.items()},
                          x, capture=set(layers), stop_after=deepest)
        for layer in layers:
            feats[layer].append(out["post"][layer].data.mean(axis=(2, 3)))
    return ids, {l: np.vstack(v) for l, v in feats.items()}


# ---------------------------------------------------------------------------
# similarity and distance
# ---------------------------------------------------------------------------

def _feature_values(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def linear_cka(x, y) -> float:
    """Linear centered kernel alignment of two [N, C] feature matrices.

    Column-centers both and returns |Yc' Xc|_F^2 / (|Xc' Xc|_F |Yc' Yc|_F),
    a similarity in [0, 1] invariant to orthogonal transforms and isotropic
    scaling.
    """
    xv, yv = _feature_values(x), _feature_values(y)
    if xv.ndim != 2 or yv.ndim != 2:
        raise MetricsError("linear_cka expects 2-d feature matrices")
    if xv.shape[0] != yv.shape[0]:
        raise MetricsError(f"example counts differ: {xv.shape[0]} vs {yv.shape[0]}")
    xc = xv - xv.mean(axis=0, keepdims=True)
    yc = yv - yv.mean(axis=0, keepdims=True)
    numerator = np.linalg.norm(yc.T @ xc) ** 2
    denom = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if denom == 0.0:
        raise MetricsError("degenerate input: a feature matrix is constant")
    return float(numerator / denom)


def layerwise_cka(model_a: M.ModelCheckpoint, model_b: M.ModelCheckpoint,
                  dataset: Dataset, split: str, layers=None) -> LayerReport:
    """CKA per layer between two models on one dataset split."""
    order_a = M.canonical_layers(model_a.spec)
    order_b = M.canonical_layers(model_b.spec)
    if layers is None:
        layers = [l for l in order_a if l in order_b]
    ids_a, feats_a = collect_features(model_a, dataset, split, layers)
    ids_b, feats_b = collect_features(model_b, dataset, split, layers)
    assert ids_a == ids_b
    entries = [(l, linear_cka(feats_a[l], feats_b[l])) for l in layers]
    return LayerReport(
        metric="cka",
        entries=entries,
        models=f"{M.checkpoint_id(model_a)}|{M.checkpoint_id(model_b)}",
        dataset=f"{dataset.name}:{split}",
    )


def _body_spec_matches(a: M.ModelSpec, b: M.ModelSpec) -> bool:
    return (a.input_size == b.input_size and a.stem == b.stem and a.blocks == b.blocks)


def kernel_l2(model_a: M.ModelCheckpoint, model_b: M.ModelCheckpoint) -> tuple:
    """Euclidean norm of convolutional-kernel differences, per layer and mean.

    Covers convolution kernels only; biases and dense layers (including any
    classifier heads) are excluded, so differing heads are allowed.
    """
    if not _body_spec_matches(model_a.spec, model_b.spec):
        raise MetricsError("kernel_l2 requires identical body specs")
    per_layer = []
    for name, arr in model_a.params.items():
        if not name.endswith(".w") or arr.ndim != 4:
            continue
        diff = arr - model_b.params[name]
        per_layer.append((name[:-2], float(np.linalg.norm(diff.ravel()))))
    mean = float(np.mean([v for _, v in per_layer]))
    return per_layer, mean


# ---------------------------------------------------------------------------
# maximal-activation sets
# ---------------------------------------------------------------------------

def topk_from_scores(ids, scores, channel, k: int) -> TopKSet:
    """Exact top-k with ties broken by ascending image id."""
    if k < 1:
        raise MetricsError("k must be >= 1")
    ranked = sorted(zip(ids, scores), key=lambda t: (-t[1], t[0]))
    return TopKSet(channel=channel, entries=[(i, float(s)) for i, s in ranked[:k]], k=k)


def topk_activations(model: M.ModelCheckpoint, dataset: Dataset, split: str,
                     channel: tuple, k: int = 100) -> TopKSet:
    """Images of a split that trigger a channel the most.

    The score of an image is the spatial mean of the channel's post-ReLU
    activation map.
    """
    layer, index = channel
    ids, feats = collect_features(model, dataset, split, [layer])
    values = feats[layer]
    if not 0 <= index < values.shape[1]:
        raise MetricsError(f"channel {index} out of range for layer {layer} "
                           f"with {values.shape[1]} channels")
    return topk_from_scores(ids, values[:, index], channel, k)


def layer_topk_sets(model: M.ModelCheckpoint, dataset: Dataset, split: str,
                    layer: str, k: int = 100) -> list:
    """Top-k sets of every channel of a layer from one feature pass."""
    ids, feats = collect_features(model, dataset, split, [layer])
    values = feats[layer]
    return [topk_from_scores(ids, values[:, c], (layer, c), k)
            for c in range(values.shape[1])]


def overlap_ratio(a: TopKSet, b: TopKSet) -> float:
    """Percentage of image ids shared by two top-k sets."""
    if not a.entries or not b.entries:
        raise MetricsError("overlap_ratio of an empty set")
    denom = min(len(a.entries), len(b.entries))
    shared = len(set(a.ids()) & set(b.ids()))
    return 100.0 * shared / denom


def class_entropy(topk: TopKSet, labels, num_classes: int) -> EntropyReport:
    """Normalized Shannon entropy of the class composition of a top-k set."""
    if num_classes < 1:
        raise MetricsError("num_classes must be >= 1")
    counts = {}
    for image_id in topk.ids():
        if image_id not in labels:
            raise MetricsError(f"missing label for image {image_id!r}")
        c = labels[image_id]
        counts[c] = counts.get(c, 0) + 1
    total = sum(counts.values())
    if total == 0:
        raise MetricsError("class_entropy of an empty set")
    p = {c: n / total for c, n in counts.items()}
    max_entropy = float(np.log2(min(topk.k, num_classes)))
    raw = -sum(q * np.log2(q) for q in p.values() if q > 0)
    value = float(raw / max_entropy) if max_entropy > 0 else 0.0
    return EntropyReport(p=p, num_classes=num_classes, max_entropy=max_entropy, value=value)


# ---------------------------------------------------------------------------
# classification quality
# ---------------------------------------------------------------------------

def topk_accuracy(probs, labels, k: int) -> float:
    """Percent of rows whose true label ranks in the k largest probabilities.

    Probability ties rank by ascending class index.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise MetricsError(f"shapes {p.shape} and {y.shape} do not align")
    if not 1 <= k <= p.shape[1]:
        raise MetricsError(f"k must be in 1..{p.shape[1]}, got {k}")
    hits = 0
    classes = np.arange(p.shape[1])
    for row, label in zip(p, y):
        order = np.lexsort((classes, -row))
        if label in order[:k]:
            hits += 1
    return 100.0 * hits / len(y)


def mean_average_precision(scores, labels, strict: bool = False) -> float:
    """Mean over classes of average precision, as a percent.

    Rows are ranked by descending score with ties broken by ascending row
    index (rows follow ascending-id dataset order).  A class without
    positives is excluded with a warning, or, in strict mode, is an error.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 2:
        raise MetricsError(f"scores {s.shape} and labels {y.shape} must be equal 2-d shapes")
    n, k = s.shape
    rows = np.arange(n)
    aps = []
    for c in range(k):
        npos = int(y[:, c].sum())
        if npos == 0:
            if strict:
                raise MetricsError(f"class {c} has no positives")
            warnings.warn(f"class {c} has no positives; excluded from mAP", stacklevel=2)
            continue
        order = np.lexsort((rows, -s[:, c]))
        hits = 0
        total = 0.0
        for rank, idx in enumerate(order, start=1):
            if y[idx, c] > 0:
                hits += 1
                total += hits / rank
        aps.append(total / npos)
    if not aps:
        raise MetricsError("no class with positives")
    return 100.0 * float(np.mean(aps))


def distribution_summary(values) -> dict:
    """Boxplot-style summary of per-channel metric values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise MetricsError("empty distribution")
    return {
        "min": float(v.min()),
        "q1": float(np.percentile(v, 25)),
        "median": float(np.percentile(v, 50)),
        "mean": float(v.mean()),
        "q3": float(np.percentile(v, 75)),
        "max": float(v.max()),
    }
