"""Fine-tuning pipelines: mode matrix, freezing, augmentation, LR schedules.

The named presets reproduce the hyperparameter table of the original
training schemes (modes A-F plus the two from-scratch schemes); training
itself is deterministic given (checkpoint, dataset, mode, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

import ftscope.tensor as T
from ftscope import model as M
from ftscope.data import Dataset, bilinear_resize

BATCH_SIZE = 32

SGD_MOMENTUM = 0.9
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# geometry of the reference augmentations, rescaled to the input size
TRANSLATE_FRACTION = 28 / 224
RESIZE_FRACTION = 256 / 224

AUGMENTATIONS = ("none", "small_transform", "random_crop")
OPTIMIZERS = ("sgd", "adam")
SCHEDULES = ("constant", "inception_decay")


class TrainingError(RuntimeError):
    """Invalid training configuration or aborted run."""


@dataclass(frozen=True)
class TrainingMode:
    lr_head: float
    lr_body: float
    deep_supervision: bool
    max_epochs: int
    unfrozen: object          # "all" | "none" | int (top n blocks)
    augmentation: str
    optimizer: str
    lr_schedule: str

    def __post_init__(self):
        if self.lr_head <= 0 or self.lr_body <= 0:
            raise TrainingError("learning rates must be positive")
        if self.max_epochs < 0:
            raise TrainingError("max_epochs must be >= 0")
        if not (self.unfrozen in ("all", "none")
                or (isinstance(self.unfrozen, int) and self.unfrozen >= 1)):
            raise TrainingError(f"unfrozen must be 'all', 'none' or a positive int, got {self.unfrozen!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise TrainingError(f"unknown augmentation {self.augmentation!r}")
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in SCHEDULES:
            raise TrainingError(f"unknown lr schedule {self.lr_schedule!r}")


MODES = {
    "A": TrainingMode(0.01, 0.001, False, 20, "all", "none", "sgd", "constant"),
    "B": TrainingMode(0.001, 0.0001, False, 20, "all", "none", "sgd", "constant"),
    "C": TrainingMode(0.001, 0.001, False, 20, "all", "none", "sgd", "constant"),
    "D": TrainingMode(0.001, 0.0001, True, 20, "all", "none", "sgd", "constant"),
    "E": TrainingMode(0.001, 0.001, True, 20, "all", "none", "sgd", "constant"),
    "F": TrainingMode(0.01, 0.01, False, 20, "all", "none", "sgd", "constant"),
    # upper layers re-initialized and trained over frozen pretrained lower layers
    "scratch-top": TrainingMode(0.0001, 0.0001, False, 200, 4, "small_transform", "adam", "constant"),
    # everything random and trainable
    "scratch-full": TrainingMode(0.001, 0.001, True, 200, "all", "random_crop", "sgd", "inception_decay"),
}


@dataclass
class EpochStats:
    train_loss: float
    val_loss: float
    val_top1: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    selected_epoch: int = -1


_CONFIG_KEYS = {
    "learning_rate_last_dense_layer": "lr_head",
    "learning_rate_other_layers": "lr_body",
    "deep_supervision": "deep_supervision",
    "maximum_number_of_epochs": "max_epochs",
    "number_of_unfrozen_layers": "unfrozen",
    "data_augmentation": "augmentation",
    "optimizer": "optimizer",
    "learning_rate_schedule": "lr_schedule",
}

_AUG_ALIASES = {
    "no": "none", "none": "none",
    "small_transformation": "small_transform", "small_transform": "small_transform",
    "random_crops": "random_crop", "random_crop": "random_crop",
}

_SCHEDULE_ALIASES = {
    "no": "constant", "constant": "constant",
    "inception": "inception_decay", "inception_decay": "inception_decay",
}


def mode_from_config(path: str) -> TrainingMode:
    """Parse a key=value preset file keyed by the hyperparameter table columns."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TrainingError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.lower().replace(" ", "_")
            if key == "mode":
                continue
            if key not in _CONFIG_KEYS:
                raise TrainingError(f"{path}:{lineno}: unknown key {key!r}")
            values[_CONFIG_KEYS[key]] = val.lower()
    missing = set(_CONFIG_KEYS.values()) - set(values)
    if missing:
        raise TrainingError(f"{path}: missing keys for {sorted(missing)}")
    unfrozen = values["unfrozen"]
    if unfrozen not in ("all", "none"):
        unfrozen = int(unfrozen)
    return TrainingMode(
        lr_head=float(values["lr_head"]),
        lr_body=float(values["lr_body"]),
        deep_supervision=values["deep_supervision"] in ("yes", "true", "1"),
        max_epochs=int(values["max_epochs"]),
        unfrozen=unfrozen,
        augmentation=_AUG_ALIASES.get(values["augmentation"], values["augmentation"]),
        optimizer=values["optimizer"],
        lr_schedule=_SCHEDULE_ALIASES.get(values["lr_schedule"], values["lr_schedule"]),
    )


def freeze(model: M.ModelCheckpoint, unfrozen) -> list:
    """Names of the parameters eligible for updates; the head always trains."""
    spec = model.spec
    all_names = list(M.param_shapes(spec))
    head_names = M.head_param_names(spec)
    if unfrozen == "all":
        return all_names
    if unfrozen == "none":
        return [n for n in all_names if n in head_names]
    n = int(unfrozen)
    if n < 1 or n > len(spec.blocks):
        raise TrainingError(f"top_n must be in 1..{len(spec.blocks)}, got {n}")
    open_blocks = {b.name for b in spec.blocks[-n:]}
    return [name for name in all_names
            if name in head_names or name.split(".")[0] in open_blocks]


def lr_at(schedule: str, base_lr: float, epoch: int) -> float:
    """Learning rate at an epoch: constant, or 4% decay every 8 epochs."""
    if epoch < 0:
        raise TrainingError("epoch must be >= 0")
    if schedule == "constant":
        return base_lr
    if schedule == "inception_decay":
        return base_lr * 0.96 ** (epoch // 8)
    raise TrainingError(f"unknown lr schedule {schedule!r}")


def augment(image: np.ndarray, scheme: str, rng) -> np.ndarray:
    """Augment one [3, H, W] image.

    small_transform: horizontal flip with p=0.5 plus an integer translation
    uniform in +-round(H * 28/224), zero-filled.  random_crop: bilinear
    resize of the shorter side to round(H * 256/224), then a uniform HxH
    crop.  Draw order is fixed: flip, dx, dy (or crop offsets oy, ox).
    """
    if scheme == "none":
        return image
    c, h, w = image.shape
    if scheme == "small_transform":
        out = image
        if rng.random() < 0.5:
            out = out[:, :, ::-1]
        t = int(round(h * TRANSLATE_FRACTION))
        dx = int(rng.integers(-t, t + 1))
        dy = int(rng.integers(-t, t + 1))
        if dx == 0 and dy == 0:
            return np.ascontiguousarray(out)
        shifted = np.zeros_like(out)
        ys = slice(max(0, dy), h + min(0, dy))
        xs = slice(max(0, dx), w + min(0, dx))
        ys_src = slice(max(0, -dy), h + min(0, -dy))
        xs_src = slice(max(0, -dx), w + min(0, -dx))
        shifted[:, ys, xs] = out[:, ys_src, xs_src]
        return shifted
    if scheme == "random_crop":
        short = min(h, w)
        scale = round(short * RESIZE_FRACTION) / short
        rh, rw = int(round(h * scale)), int(round(w * scale))
        resized = bilinear_resize(image, rh, rw)
        oy = int(rng.integers(0, rh - h + 1))
        ox = int(rng.integers(0, rw - w + 1))
        return resized[:, oy:oy + h, ox:ox + w]
    raise TrainingError(f"unknown augmentation {scheme!r}")


def _task_loss(probs, labels, task):
    if task == "style":
        return T.cross_entropy(probs, labels)
    return T.multilabel_bce(probs, labels)


def _top1(probs: np.ndarray, labels, task: str) -> float:
    """Top-1 on style labels; for multi-label, argmax-hit rate over rows
    with at least one positive."""
    if task == "style":
        return float(np.mean(probs.argmax(axis=1) == labels))
    has_pos = labels.sum(axis=1) > 0
    if not has_pos.any():
        return 0.0
    hits = labels[np.arange(len(labels)), probs.argmax(axis=1)] > 0
    return float(np.mean(hits[has_pos]))


def _check_head(spec: M.ModelSpec, dataset: Dataset):
    if spec.head.classes != dataset.num_classes:
        raise TrainingError(
            f"head has {spec.head.classes} outputs but dataset has {dataset.num_classes} classes"
        )
    if dataset.task == "object" and spec.head.kind != "sigmoid":
        raise TrainingError("multi-label datasets require a sigmoid head")


def _evaluate(spec, params, dataset, ids, task):
    """Validation loss and top-1 through the inference head (no aux)."""
    losses, top1s, weights = [], [], []
    for i in range(0, len(ids), BATCH_SIZE):
        chunk = ids[i:i + BATCH_SIZE]
        x = dataset.batch(chunk)
        y = dataset.label_array(chunk)
        out = M.run_graph(spec, {k: T.Tensor(v) for k, v in params.items()}, T.Tensor(x))
        losses.append(_task_loss(out["probs"], y, task).item())
        top1s.append(_top1(out["probs"].data, y, task))
        weights.append(len(chunk))
    w = np.array(weights, dtype=float)
    return float(np.average(losses, weights=w)), float(np.average(top1s, weights=w))


def train(model: M.ModelCheckpoint, dataset: Dataset, mode: TrainingMode,
          seed: int) -> tuple:
    """Run the fine-tuning loop and return (best checkpoint, history).

    Minibatches of 32, shuffle order fixed by (seed, epoch), head and body
    parameter groups at their own learning rates.  The returned checkpoint
    is the epoch with the best validation loss (ties: earliest).  Auxiliary
    heads used for deep supervision are training equipment: when the input
    spec has none, they are attached for the run and stripped afterwards.
    """
    _check_head(model.spec, dataset)
    train_ids = dataset.split_ids("train")
    val_ids = dataset.split_ids("val")
    if not train_ids:
        raise TrainingError("empty training split")
    if not val_ids:
        raise TrainingError("empty validation split")
    parent_id = M.checkpoint_id(model)

    if mode.max_epochs == 0:
        out = model.copy()
        out.meta = replace(out.meta, provenance=f"fine-tuned({parent_id})", epoch=-1)
        return out, TrainHistory()

    rng = np.random.default_rng([seed, 17])
    work_spec = model.spec
    params = {k: v.copy() for k, v in model.params.items()}
    strip_aux = False
    if mode.deep_supervision and not work_spec.aux_heads:
        work_spec = replace(work_spec, aux_heads=M.standard_aux_heads(work_spec))
        aux_names = M.head_param_names(work_spec) - M.head_param_names(model.spec)
        fresh = M._init_params(work_spec, np.random.default_rng([seed, 29]), names=aux_names)
        params.update(fresh)
        params = {k: params[k] for k in M.param_shapes(work_spec)}
        strip_aux = True
    use_aux = mode.deep_supervision and bool(work_spec.aux_heads)
    aux_weights = {a.attach_after: a.loss_weight for a in work_spec.aux_heads}

    work = M.ModelCheckpoint(work_spec, params, model.meta)
    trainable = freeze(work, mode.unfrozen)
    head_names = M.head_param_names(work_spec)
    velocity = {n: np.zeros_like(params[n]) for n in trainable}
    adam_m = {n: np.zeros_like(params[n]) for n in trainable}
    adam_v = {n: np.zeros_like(params[n]) for n in trainable}
    step = 0

    history = TrainHistory()
    best = (np.inf, -1, None)
    task = dataset.task
    for epoch in range(mode.max_epochs):
        order = [train_ids[j] for j in rng.permutation(len(train_ids))]
        scale = lr_at(mode.lr_schedule, 1.0, epoch)
        epoch_losses = []
        for start in range(0, len(order), BATCH_SIZE):
            chunk = order[start:start + BATCH_SIZE]
            x = np.stack([augment(dataset.images[i], mode.augmentation, rng) for i in chunk])
            y = dataset.label_array(chunk)
            tape = T.Tape()
            tensors = {}
            leaves = {}
            for name, arr in params.items():
                if name in trainable:
                    leaves[name] = tape.leaf(arr)
                    tensors[name] = leaves[name]
                else:
                    tensors[name] = T.Tensor(arr)
            try:
                out = M.run_graph(work_spec, tensors, T.Tensor(x), with_aux=use_aux)
                loss = _task_loss(out["probs"], y, task)
                for block, aux_probs in out["aux_probs"].items():
                    loss = loss + aux_weights[block] * _task_loss(aux_probs, y, task)
                grads = T.backward(tape, loss)
            except T.NonFiniteError as e:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // BATCH_SIZE}: {e}"
                ) from e
            epoch_losses.append((loss.item(), len(chunk)))
            step += 1
            for name in trainable:
                g = grads[leaves[name].node]
                lr = scale * (mode.lr_head if name in head_names else mode.lr_body)
                if mode.optimizer == "sgd":
                    velocity[name] = SGD_MOMENTUM * velocity[name] + g
                    params[name] = params[name] - lr * velocity[name]
                else:
                    adam_m[name] = ADAM_BETA1 * adam_m[name] + (1 - ADAM_BETA1) * g
                    adam_v[name] = ADAM_BETA2 * adam_v[name] + (1 - ADAM_BETA2) * g * g
                    mhat = adam_m[name] / (1 - ADAM_BETA1 ** step)
                    vhat = adam_v[name] / (1 - ADAM_BETA2 ** step)
                    params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        counts = np.array([n for _, n in epoch_losses], dtype=float)
        train_loss = float(np.average([l for l, _ in epoch_losses], weights=counts))
        val_loss, val_top1 = _evaluate(work_spec, params, dataset, val_ids, task)
        history.epochs.append(EpochStats(train_loss, val_loss, val_top1))
        if val_loss < best[0]:
            best = (val_loss, epoch, {k: v.copy() for k, v in params.items()})

    history.selected_epoch = best[1]
    final = best[2]
    if strip_aux:
        final = {k: final[k] for k in M.param_shapes(model.spec)}
        out_spec = model.spec
    else:
        out_spec = work_spec
    meta = M.CheckpointMeta(seed=seed, provenance=f"fine-tuned({parent_id})",
                            epoch=best[1])
    return M.ModelCheckpoint(out_spec, final, meta), history


def double_finetune(model: M.ModelCheckpoint,
                    intermediate_dataset: Dataset, intermediate_mode: TrainingMode,
                    target_dataset: Dataset, target_mode: TrainingMode,
                    seed: int) -> M.ModelCheckpoint:
    """Fine-tune on the intermediate dataset, swap heads, fine-tune again.

    Exactly train(replace_head(train(model, intermediate), target), target);
    stage seeds are (seed, seed+1 for the head, seed+2).
    """
    stage1, _ = train(model, intermediate_dataset, intermediate_mode, seed)
    kind = "sigmoid" if target_dataset.task == "object" else "softmax"
    swapped = M.replace_head(stage1, M.Head(kind, target_dataset.num_classes), seed + 1)
    stage2, _ = train(swapped, target_dataset, target_mode, seed + 2)
    return stage2


def ensemble_predict(models, batch) -> np.ndarray:
    """Arithmetic mean of the per-model probability outputs."""
    models = list(models)
    if not models:
        raise TrainingError("ensemble needs at least one model")
    head = models[0].spec.head
    for m in models[1:]:
        if m.spec.head.classes != head.classes:
            raise TrainingError(
                f"ensemble class counts differ: {m.spec.head.classes} vs {head.classes}"
            )
        if m.spec.head.kind != head.kind:
            raise TrainingError("ensemble head kinds differ")
    probs = [M.forward(m, batch)[0] for m in models]
    return np.mean(probs, axis=0)


def write_history(history: TrainHistory, path: str):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_top1"])
        for i, e in enumerate(history.epochs):
            writer.writerow([i, f"{e.train_loss:.10g}", f"{e.val_loss:.10g}", f"{e.val_top1:.10g}"])
