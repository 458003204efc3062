"""Desk-scale Inception-style classifier with named layers and checkpoints.

The architecture keeps the named-layer depth axis of the full-size network
(conv stem followed by blocks mixed3a..mixed5b) at a small fraction of the
parameters: each block concatenates 1x1, 3x3, 5x5 and pool-projection
branches, with 2x2 max pools between mixed3b->mixed4a and mixed4e->mixed5a.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

import ftscope.tensor as T

CANONICAL_BLOCKS = (
    "mixed3a", "mixed3b",
    "mixed4a", "mixed4b", "mixed4c", "mixed4d", "mixed4e",
    "mixed5a", "mixed5b",
)

# blocks preceded by a 2x2 max pool (when they have a predecessor)
_POOL_BEFORE = ("mixed4a", "mixed5a")

_BRANCH_PARTS = ("b1x1", "b3x3_reduce", "b3x3", "b5x5_reduce", "b5x5", "pool_proj")

CHECKPOINT_FORMAT_VERSION = 1


class SpecError(ValueError):
    """Malformed model specification."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint data."""


@dataclass(frozen=True)
class ConvStage:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class PoolStage:
    size: int = 2
    stride: int = 2


@dataclass(frozen=True)
class InceptionBlock:
    name: str
    width: int  # total output channels, split 4 ways; must be divisible by 8


@dataclass(frozen=True)
class Head:
    kind: str      # "softmax" or "sigmoid"
    classes: int


@dataclass(frozen=True)
class AuxHead:
    attach_after: str
    loss_weight: float = 0.3


@dataclass(frozen=True)
class ModelSpec:
    head: Head
    input_size: int = 32
    stem: tuple = (ConvStage(16), PoolStage(), ConvStage(32), PoolStage())
    blocks: tuple = tuple(InceptionBlock(n, w) for n, w in zip(
        CANONICAL_BLOCKS, (32, 32, 48, 48, 64, 64, 80, 96, 96)))
    aux_heads: tuple = ()

    def __post_init__(self):
        _validate_spec(self)


@dataclass(frozen=True)
class CheckpointMeta:
    seed: int
    provenance: str  # "random" | "pretrained" | "fine-tuned(<parent id>)"
    epoch: int = 0


@dataclass
class ModelCheckpoint:
    spec: ModelSpec
    params: dict          # ordered name -> float64 ndarray
    meta: CheckpointMeta

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.spec, {k: v.copy() for k, v in self.params.items()}, self.meta)


@dataclass
class ActivationRecord:
    layer: str
    values: np.ndarray    # [N, C, H, W] post-activation, or [N, C] pooled


def _validate_spec(spec: ModelSpec):
    if spec.input_size < 1:
        raise SpecError("input_size must be positive")
    if spec.head.kind not in ("softmax", "sigmoid"):
        raise SpecError(f"unknown head kind {spec.head.kind!r}")
    if spec.head.classes < 1:
        raise SpecError("head must have at least one class")
    names = [b.name for b in spec.blocks]
    if len(set(names)) != len(names):
        raise SpecError("block names must be unique")
    if names:
        try:
            start = CANONICAL_BLOCKS.index(names[0])
        except ValueError:
            raise SpecError(f"unknown block name {names[0]!r}") from None
        expected = CANONICAL_BLOCKS[start:start + len(names)]
        if tuple(names) != expected:
            raise SpecError(
                f"blocks must form a contiguous run of {CANONICAL_BLOCKS}, got {names}"
            )
    for b in spec.blocks:
        if b.width % 8 != 0 or b.width < 8:
            raise SpecError(f"block {b.name} width {b.width} must be a positive multiple of 8")
    for aux in spec.aux_heads:
        if aux.attach_after not in names:
            raise SpecError(f"aux head attaches to unknown block {aux.attach_after!r}")
    for stage in spec.stem:
        if not isinstance(stage, (ConvStage, PoolStage)):
            raise SpecError(f"unknown stem stage {stage!r}")


def default_spec(head: Head, input_size: int = 32, num_blocks: int = 9,
                 aux_heads: tuple = ()) -> ModelSpec:
    """The standard desk-scale spec, optionally truncated to fewer blocks."""
    widths = (32, 32, 48, 48, 64, 64, 80, 96, 96)
    blocks = tuple(InceptionBlock(n, w) for n, w in zip(CANONICAL_BLOCKS[:num_blocks], widths))
    return ModelSpec(head=head, input_size=input_size, blocks=blocks, aux_heads=aux_heads)


def standard_aux_heads(spec: ModelSpec) -> tuple:
    """Training-time auxiliary heads after mixed4a and mixed4d, weight 0.3."""
    names = {b.name for b in spec.blocks}
    return tuple(AuxHead(n, 0.3) for n in ("mixed4a", "mixed4d") if n in names)


def canonical_layers(spec: ModelSpec) -> list:
    """Capturable layer names in depth order: stem convs then blocks."""
    out = []
    ci = 0
    for stage in spec.stem:
        if isinstance(stage, ConvStage):
            out.append(f"conv{ci}")
            ci += 1
    out.extend(b.name for b in spec.blocks)
    return out


def block_channels(spec: ModelSpec) -> dict:
    """Output channel count of every capturable layer."""
    out = {}
    ci = 0
    for stage in spec.stem:
        if isinstance(stage, ConvStage):
            out[f"conv{ci}"] = stage.out_channels
            ci += 1
    for b in spec.blocks:
        out[b.name] = b.width
    return out


def param_shapes(spec: ModelSpec) -> dict:
    """Ordered parameter name -> shape map generated by the spec."""
    shapes = {}
    in_ch = 3
    ci = 0
    for stage in spec.stem:
        if isinstance(stage, ConvStage):
            shapes[f"conv{ci}.w"] = (stage.out_channels, in_ch, stage.kernel, stage.kernel)
            shapes[f"conv{ci}.b"] = (stage.out_channels,)
            in_ch = stage.out_channels
            ci += 1
    for b in spec.blocks:
        q, r = b.width // 4, b.width // 8
        shapes[f"{b.name}.b1x1.w"] = (q, in_ch, 1, 1)
        shapes[f"{b.name}.b1x1.b"] = (q,)
        shapes[f"{b.name}.b3x3_reduce.w"] = (q, in_ch, 1, 1)
        shapes[f"{b.name}.b3x3_reduce.b"] = (q,)
        shapes[f"{b.name}.b3x3.w"] = (q, q, 3, 3)
        shapes[f"{b.name}.b3x3.b"] = (q,)
        shapes[f"{b.name}.b5x5_reduce.w"] = (r, in_ch, 1, 1)
        shapes[f"{b.name}.b5x5_reduce.b"] = (r,)
        shapes[f"{b.name}.b5x5.w"] = (q, r, 5, 5)
        shapes[f"{b.name}.b5x5.b"] = (q,)
        shapes[f"{b.name}.pool_proj.w"] = (q, in_ch, 1, 1)
        shapes[f"{b.name}.pool_proj.b"] = (q,)
        in_ch = b.width
    shapes["head.w"] = (in_ch, spec.head.classes)
    shapes["head.b"] = (spec.head.classes,)
    channels = block_channels(spec)
    for aux in spec.aux_heads:
        shapes[f"aux_{aux.attach_after}.w"] = (channels[aux.attach_after], spec.head.classes)
        shapes[f"aux_{aux.attach_after}.b"] = (spec.head.classes,)
    return shapes


def head_param_names(spec: ModelSpec) -> set:
    names = {"head.w", "head.b"}
    names.update(f"aux_{a.attach_after}.{s}" for a in spec.aux_heads for s in ("w", "b"))
    return names


def _he_uniform(rng, shape):
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    else:
        fan_in = shape[0]
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _init_params(spec: ModelSpec, rng, names=None) -> dict:
    out = {}
    for name, shape in param_shapes(spec).items():
        if names is not None and name not in names:
            continue
        if name.endswith(".b"):
            out[name] = np.zeros(shape)
        else:
            out[name] = _he_uniform(rng, shape)
    return out


def build_model(spec: ModelSpec, init) -> ModelCheckpoint:
    """Materialize a checkpoint: ``init`` is a seed or a source checkpoint.

    Random init draws weights He-uniform scaled by fan-in; biases are zero.
    """
    if isinstance(init, ModelCheckpoint):
        if init.spec != spec:
            raise SpecError("from_checkpoint init requires a matching spec")
        return init.copy()
    seed = int(init)
    rng = np.random.default_rng(seed)
    params = _init_params(spec, rng)
    return ModelCheckpoint(spec, params, CheckpointMeta(seed=seed, provenance="random"))


def checkpoint_id(model: ModelCheckpoint) -> str:
    """Deterministic content hash of the parameter values."""
    h = hashlib.sha256()
    for name, arr in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:12]


def replace_head(model: ModelCheckpoint, head: Head, seed: int) -> ModelCheckpoint:
    """Swap the classifier head, preserving every non-head tensor bit-exactly.

    Auxiliary heads, when present in the spec, are classifier equipment and
    are re-drawn alongside the main head.
    """
    new_spec = replace(model.spec, head=head)
    rng = np.random.default_rng(seed)
    head_names = head_param_names(new_spec)
    fresh = _init_params(new_spec, rng, names=head_names)
    params = {}
    for name, shape in param_shapes(new_spec).items():
        params[name] = fresh[name] if name in head_names else model.params[name].copy()
    meta = replace(model.meta, seed=seed)
    return ModelCheckpoint(new_spec, params, meta)


def randomize_blocks(model: ModelCheckpoint, block_names, seed: int) -> ModelCheckpoint:
    """Re-draw the parameters of the listed blocks (plus the head) from seed.

    Used to build partially-random models whose upper layers train from
    scratch over frozen pretrained lower layers.
    """
    block_names = set(block_names)
    known = {b.name for b in model.spec.blocks}
    unknown = block_names - known
    if unknown:
        raise SpecError(f"unknown blocks {sorted(unknown)}")
    targets = {n for n in param_shapes(model.spec)
               if n.split(".")[0] in block_names} | head_param_names(model.spec)
    rng = np.random.default_rng(seed)
    fresh = _init_params(model.spec, rng, names=targets)
    params = {name: (fresh[name] if name in targets else model.params[name].copy())
              for name in param_shapes(model.spec)}
    return ModelCheckpoint(model.spec, params, replace(model.meta, seed=seed, provenance="random"))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _conv(x, params, prefix, padding):
    return T.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], stride=1, padding=padding)


def run_graph(spec: ModelSpec, params: dict, x: T.Tensor, capture=(),
              capture_pre=(), stop_after=None, with_aux=False):
    """Run the network on tensors, optionally stopping early.

    ``params`` maps names to Tensors (tape leaves during training, plain
    tensors for inference).  Returns a dict with ``probs`` (None when
    stopped early), ``post``/``pre`` activation maps by layer name, and
    ``aux_probs`` when requested.
    """
    layers = canonical_layers(spec)
    unknown = (set(capture) | set(capture_pre)) - set(layers)
    if unknown:
        raise SpecError(f"unknown layer name(s) {sorted(unknown)}; known: {layers}")
    post, pre = {}, {}
    aux_by_block = {a.attach_after: a for a in spec.aux_heads} if with_aux else {}
    aux_probs = {}

    def note(name, pre_t, post_t):
        if name in capture_pre:
            pre[name] = pre_t
        if name in capture:
            post[name] = post_t

    def activate(logits):
        return T.softmax(logits) if spec.head.kind == "softmax" else T.sigmoid(logits)

    ci = 0
    for stage in spec.stem:
        if isinstance(stage, ConvStage):
            name = f"conv{ci}"
            z = T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"],
                         stride=stage.stride, padding=stage.padding)
            x = T.relu(z)
            note(name, z, x)
            if stop_after == name:
                return {"probs": None, "post": post, "pre": pre, "aux_probs": aux_probs}
            ci += 1
        else:
            x = T.pool2d(x, "max", stage.size, stage.stride)

    prev = None
    for b in spec.blocks:
        if b.name in _POOL_BEFORE and prev is not None:
            x = T.pool2d(x, "max", 2, 2)
        b1 = _conv(x, params, f"{b.name}.b1x1", 0)
        b3 = _conv(T.relu(_conv(x, params, f"{b.name}.b3x3_reduce", 0)), params, f"{b.name}.b3x3", 1)
        b5 = _conv(T.relu(_conv(x, params, f"{b.name}.b5x5_reduce", 0)), params, f"{b.name}.b5x5", 2)
        bp = _conv(T.pool2d(x, "max", 3, 1, padding=1), params, f"{b.name}.pool_proj", 0)
        z = T.concat_channels([b1, b3, b5, bp])
        x = T.relu(z)
        note(b.name, z, x)
        if b.name in aux_by_block:
            feats = T.global_avg_pool(x)
            logits = T.dense(feats, params[f"aux_{b.name}.w"], params[f"aux_{b.name}.b"])
            aux_probs[b.name] = activate(logits)
        if stop_after == b.name:
            return {"probs": None, "post": post, "pre": pre, "aux_probs": aux_probs}
        prev = b

    feats = T.global_avg_pool(x)
    logits = T.dense(feats, params["head.w"], params["head.b"])
    probs = activate(logits)
    return {"probs": probs, "post": post, "pre": pre, "aux_probs": aux_probs}


def _as_tensors(params: dict) -> dict:
    return {k: T.Tensor(v) for k, v in params.items()}


def forward(model: ModelCheckpoint, batch, capture=()) -> tuple:
    """Pure inference: probabilities plus post-activation records.

    ``batch`` is [N, 3, H, W] with H = W = spec.input_size.  Records
    follow canonical layer order regardless of the order of ``capture``.
    """
    arr = np.asarray(batch, dtype=np.float64)
    s = model.spec.input_size
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != s or arr.shape[3] != s:
        raise SpecError(f"batch shape {arr.shape} does not match [N, 3, {s}, {s}]")
    out = run_graph(model.spec, _as_tensors(model.params), T.Tensor(arr), capture=set(capture))
    records = [ActivationRecord(name, out["post"][name].data)
               for name in canonical_layers(model.spec) if name in out["post"]]
    return out["probs"].data, records


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _stage_to_dict(stage):
    if isinstance(stage, ConvStage):
        return {"kind": "conv", "out_channels": stage.out_channels,
                "kernel": stage.kernel, "stride": stage.stride, "padding": stage.padding}
    return {"kind": "maxpool", "size": stage.size, "stride": stage.stride}


def _stage_from_dict(d):
    if d["kind"] == "conv":
        return ConvStage(d["out_channels"], d["kernel"], d["stride"], d["padding"])
    if d["kind"] == "maxpool":
        return PoolStage(d["size"], d["stride"])
    raise CheckpointError(f"unknown stem stage kind {d['kind']!r}")


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "input_size": spec.input_size,
        "stem": [_stage_to_dict(s) for s in spec.stem],
        "blocks": [{"name": b.name, "width": b.width} for b in spec.blocks],
        "head": {"kind": spec.head.kind, "classes": spec.head.classes},
        "aux_heads": [{"attach_after": a.attach_after, "loss_weight": a.loss_weight}
                      for a in spec.aux_heads],
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        head=Head(d["head"]["kind"], d["head"]["classes"]),
        input_size=d["input_size"],
        stem=tuple(_stage_from_dict(s) for s in d["stem"]),
        blocks=tuple(InceptionBlock(b["name"], b["width"]) for b in d["blocks"]),
        aux_heads=tuple(AuxHead(a["attach_after"], a["loss_weight"]) for a in d["aux_heads"]),
    )


def save_checkpoint(model: ModelCheckpoint, path: str):
    """Write manifest.json plus params.bin (little-endian float64 blobs)."""
    os.makedirs(path, exist_ok=True)
    tensors = []
    offset = 0
    blobs = []
    for name, arr in model.params.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape),
                        "byte_offset": offset, "byte_length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": spec_to_dict(model.spec),
        "meta": {"seed": model.meta.seed, "provenance": model.meta.provenance,
                 "epoch": model.meta.epoch},
        "tensors": tensors,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    with open(os.path.join(path, "params.bin"), "wb") as f:
        f.write(b"".join(blobs))


def load_checkpoint(path: str) -> ModelCheckpoint:
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as e:
        raise CheckpointError(f"cannot read {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed manifest {manifest_path}: {e}") from e
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint format version {version!r}")
    spec = spec_from_dict(manifest["spec"])
    expected = param_shapes(spec)
    listed = {t["name"]: t for t in manifest["tensors"]}
    for name in expected:
        if name not in listed:
            raise CheckpointError(f"missing parameter {name!r} in manifest")
    extra = set(listed) - set(expected)
    if extra:
        raise CheckpointError(f"manifest lists unknown parameters {sorted(extra)}")
    bin_path = os.path.join(path, "params.bin")
    try:
        with open(bin_path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {bin_path}: {e}") from e
    total = sum(t["byte_length"] for t in manifest["tensors"])
    if total != len(blob):
        raise CheckpointError(
            f"params.bin length mismatch: manifest says {total} bytes, file has {len(blob)}"
        )
    params = {}
    for name, shape in expected.items():
        t = listed[name]
        if tuple(t["shape"]) != shape:
            raise CheckpointError(f"parameter {name!r} has shape {t['shape']}, expected {list(shape)}")
        n = int(np.prod(shape)) if shape else 1
        if t["byte_length"] != n * 8:
            raise CheckpointError(f"parameter {name!r} byte length mismatch")
        start, end = t["byte_offset"], t["byte_offset"] + t["byte_length"]
        if end > len(blob):
            raise CheckpointError(f"parameter {name!r} extends past end of params.bin")
        params[name] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).copy()
    meta = CheckpointMeta(seed=manifest["meta"]["seed"],
                          provenance=manifest["meta"]["provenance"],
                          epoch=manifest["meta"]["epoch"])
    return ModelCheckpoint(spec, params, meta)
