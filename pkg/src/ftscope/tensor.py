"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records every differentiable operation in creation order, which
is a valid topological order by construction.  Tensors are immutable value
wrappers around numpy arrays; only tensors created through ``Tape.leaf``
receive gradients from :func:`backward`.  Every operation validates that
its output is finite and raises :class:`NonFiniteError` otherwise.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "AutodiffError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "clamp",
    "color_transform",
    "concat_channels",
    "constant",
    "conv2d",
    "cross_entropy",
    "dense",
    "fft2",
    "gather_rows",
    "global_avg_pool",
    "half_spectrum_to_image",
    "ifft2",
    "log",
    "matmul",
    "mean_all",
    "mul",
    "multilabel_bce",
    "neg",
    "pool2d",
    "relu",
    "reshape",
    "select_channel",
    "sigmoid",
    "softmax",
    "sub",
    "sum_all",
]

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class AutodiffError(RuntimeError):
    """Misuse of the tape machinery (wrong tape, non-scalar loss, ...)."""


class _Node:
    __slots__ = ("inputs", "grad_fn", "shape")

    def __init__(self, inputs, grad_fn, shape):
        self.inputs = inputs      # tuple of node indices (None for constants)
        self.grad_fn = grad_fn    # None for leaves
        self.shape = shape


class Tape:
    """Append-only operation record; every node's inputs precede it."""

    def __init__(self):
        self.nodes = []
        self.leaf_indices = []

    def _append(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, data) -> "Tensor":
        """Register ``data`` as a tracked input (a parameter)."""
        arr = _as_array(data)
        idx = self._append(_Node((), None, arr.shape))
        self.leaf_indices.append(idx)
        return Tensor(arr, self, idx)


class Tensor:
    """Immutable dense array of float64 with an optional tape handle."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        arr = _as_array(data)
        _ensure_finite(arr, "tensor")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tracked = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.data.shape}{tracked})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, scalar):
        return mul(self, constant(1.0 / float(scalar)))

    def __neg__(self):
        return neg(self)


def constant(value) -> Tensor:
    return Tensor(value)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


def _ensure_finite(arr, op):
    # cheap pass first: a non-finite entry poisons the sum; a finite sum of
    # non-finite data is impossible, and an overflowing finite sum only
    # triggers the exact full scan below
    if np.isfinite(arr.sum()):
        return
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(data, parents, grad_fn_builder, op):
    """Create the output tensor, recording a node when any parent is tracked.

    ``grad_fn_builder`` is called lazily so forward-only evaluation does not
    pay for closure state.
    """
    _ensure_finite(data, op)
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif tape is not p.tape:
                raise AutodiffError(f"{op}: operands recorded on different tapes")
    if tape is None:
        return Tensor(data)
    inputs = tuple(p.node for p in parents)
    idx = tape._append(_Node(inputs, grad_fn_builder(), data.shape))
    return Tensor(data, tape, idx)


def backward(tape: Tape, loss: Tensor) -> dict:
    """Gradients of a scalar ``loss`` with respect to every tape leaf.

    Returns a map from leaf node handle to gradient array; leaves that do
    not influence the loss get zero gradients.
    """
    if loss.tape is not tape or loss.node is None:
        raise AutodiffError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.data.shape}")
    grads = [None] * len(tape.nodes)
    grads[loss.node] = np.ones_like(loss.data)
    for i in range(loss.node, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.grad_fn is None:
            continue
        parts = node.grad_fn(g)
        for j, pg in zip(node.inputs, parts):
            if j is None or pg is None:
                continue
            grads[j] = pg if grads[j] is None else grads[j] + pg
        grads[i] = None  # free intermediate storage
    out = {}
    for idx in tape.leaf_indices:
        g = grads[idx]
        if g is None:
            g = np.zeros(tape.nodes[idx].shape)
        else:
            _ensure_finite(g, "backward")
        out[idx] = g
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def build():
        ash, bsh = a.data.shape, b.data.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))

    return _result(data, (a, b), build, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def build():
        ash, bsh = a.data.shape, b.data.shape
        return lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))

    return _result(data, (a, b), build, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def build():
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _result(data, (a, b), build, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda: lambda g: (-g,), "neg")


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def build():
        shape = a.data.shape
        return lambda g: (np.broadcast_to(g, shape).copy(),)

    return _result(data, (a,), build, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.sum() / n)

    def build():
        shape = a.data.shape
        return lambda g: (np.broadcast_to(g / n, shape).copy(),)

    return _result(data, (a,), build, "mean_all")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ShapeError("log requires strictly positive input; clamp first")
    data = np.log(a.data)

    def build():
        ad = a.data
        return lambda g: (g / ad,)

    return _result(data, (a,), build, "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def build():
        mask = (a.data >= lo) & (a.data <= hi)
        return lambda g: (g * mask,)

    return _result(data, (a,), build, "clamp")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def build():
        mask = a.data > 0
        return lambda g: (g * mask,)

    return _result(data, (a,), build, "relu")


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def build():
        s = data
        return lambda g: (g * s * (1.0 - s),)

    return _result(data, (a,), build, "sigmoid")


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of a [N, K] tensor; rows sum to 1 within 1e-12."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax expects [N, K], got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def build():
        s = data
        return lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(data, (a,), build, "softmax")


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def build():
        orig = a.data.shape
        return lambda g: (g.reshape(orig),)

    return _result(data, (a,), build, "reshape")


def gather_rows(probs: Tensor, labels) -> Tensor:
    """Pick ``probs[i, labels[i]]`` for each row i; returns a [N] tensor."""
    idx = np.asarray(labels, dtype=np.int64)
    if probs.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != probs.data.shape[0]:
        raise ShapeError(
            f"gather_rows expects [N, K] probs and [N] labels, got {probs.data.shape} and {idx.shape}"
        )
    if np.any(idx < 0) or np.any(idx >= probs.data.shape[1]):
        raise ShapeError(f"label index out of range for {probs.data.shape[1]} classes")
    rows = np.arange(idx.shape[0])
    data = probs.data[rows, idx]

    def build():
        shape = probs.data.shape

        def grad(g):
            out = np.zeros(shape)
            out[rows, idx] = g
            return (out,)

        return grad

    return _result(data, (probs,), build, "gather_rows")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape} do not align")
    data = a.data @ b.data

    def build():
        ad, bd = a.data, b.data
        return lambda g: (g @ bd.T, ad.T @ g)

    return _result(data, (a, b), build, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x [N, D] @ weight [D, K] + bias [K]."""
    return add(matmul(x, weight), bias)


def color_transform(x: Tensor, m: np.ndarray) -> Tensor:
    """Map channel vectors of an image through a fixed 3x3 matrix.

    ``x`` is [3, H, W]; output channel c is sum_d m[c, d] * x[d].
    """
    m = np.asarray(m, dtype=np.float64)
    if x.data.ndim != 3 or x.data.shape[0] != m.shape[1] or m.shape[0] != m.shape[1]:
        raise ShapeError(f"color_transform expects [C, H, W] with square matrix, got {x.data.shape} and {m.shape}")
    data = np.einsum("cd,dhw->chw", m, x.data)

    def build():
        return lambda g: (np.einsum("cd,chw->dhw", m, g),)

    return _result(data, (x,), build, "color_transform")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N, C, H, W] with kernel [F, C, kh, kw] plus bias [F]."""
    xd, kd, bd = x.data, kernel.data, bias.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {xd.shape} and {kd.shape}")
    n, c, h, w = xd.shape
    f, kc, kh, kw = kd.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if bd.shape != (f,):
        raise ShapeError(f"conv2d bias shape {bd.shape} does not match {f} filters")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # pointwise convolution: plain channel mixing, no window extraction
        kmat = kd.reshape(f, c)
        data = np.einsum("fc,nchw->nfhw", kmat, xd, optimize=True) + bd[:, None, None]

        def build_1x1():
            need_gx = x.node is not None

            def grad(g):
                gb = g.sum(axis=(0, 2, 3))
                gk = np.einsum("nfhw,nchw->fc", g, xd, optimize=True).reshape(f, c, 1, 1)
                if not need_gx:
                    return None, gk, gb
                gx = np.einsum("fc,nfhw->nchw", kmat, g, optimize=True)
                return gx, gk, gb

            return grad

        return _result(data, (x, kernel, bias), build_1x1, "conv2d")

    cols = _im2col(xd, kh, kw, stride, padding)
    kflat = kd.reshape(f, c * kh * kw)
    out = cols @ kflat.T + bd
    data = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def build():
        need_gx = x.node is not None

        def grad(g):
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
            gb = gmat.sum(axis=0)
            gk = (gmat.T @ cols).reshape(f, c, kh, kw)
            if not need_gx:
                return None, gk, gb
            if stride == 1 and kh == kw and padding <= kh - 1:
                # grad wrt input is itself a correlation of g with the
                # spatially rotated, channel-transposed kernel
                krot = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gcols = _im2col(g, kh, kw, 1, kh - 1 - padding)
                gx = gcols @ krot.reshape(c, f * kh * kw).T
                return gx.reshape(n, h, w, c).transpose(0, 3, 1, 2), gk, gb
            gcols = (gmat @ kflat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp))
            for dh in range(kh):
                for dw in range(kw):
                    gxp[:, :, dh:dh + stride * ho:stride, dw:dw + stride * wo:stride] += \
                        gcols[:, :, :, :, dh, dw].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            return gx, gk, gb

        return grad

    return _result(data, (x, kernel, bias), build, "conv2d")


def _im2col(xd, kh, kw, stride, padding):
    """Extract [N*Ho*Wo, C*kh*kw] patch matrix (zero padding)."""
    n, c, h, w = xd.shape
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + w] = xd
    else:
        xp = xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def pool2d(x: Tensor, kind: str, size: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max or average pooling; avg divides by the count of non-padded elements."""
    if kind not in ("max", "avg"):
        raise ShapeError(f"pool2d kind must be 'max' or 'avg', got {kind!r}")
    if size < 1:
        raise ShapeError(f"pool2d size must be >= 1, got {size}")
    stride = size if stride is None else stride
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"pool2d expects [N, C, H, W], got {xd.shape}")
    n, c, h, w = xd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if size > hp or size > wp:
        raise ShapeError(f"pool2d window {size} larger than padded input {hp}x{wp}")
    ho = (hp - size) // stride + 1
    wo = (wp - size) // stride + 1

    if kind == "max":
        if padding:
            xp = np.full((n, c, hp, wp), -np.inf)
            xp[:, :, padding:padding + h, padding:padding + w] = xd
        else:
            xp = xd

        def window(dh, dw):
            return xp[:, :, dh:dh + stride * ho:stride, dw:dw + stride * wo:stride]

        data = window(0, 0).copy()
        for dh in range(size):
            for dw in range(size):
                if dh or dw:
                    np.maximum(data, window(dh, dw), out=data)
        if np.any(np.isneginf(data)):
            raise ShapeError("pool2d window contains no valid (non-padding) elements")

        def build():
            def grad(g):
                # route gradient to the first window position (row-major)
                # equal to the max, matching an argmax tie rule
                gxp = np.zeros((n, c, hp, wp))
                taken = np.zeros(data.shape, dtype=bool)
                for dh in range(size):
                    for dw in range(size):
                        sel = (window(dh, dw) == data) & ~taken
                        gxp[:, :, dh:dh + stride * ho:stride, dw:dw + stride * wo:stride] += g * sel
                        taken |= sel
                return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

            return grad

        return _result(data, (x,), build, "pool2d")

    if padding:
        xp = np.zeros((n, c, hp, wp))
        xp[:, :, padding:padding + h, padding:padding + w] = xd
    else:
        xp = xd
    win = sliding_window_view(xp, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    sums = win.sum(axis=(4, 5))
    valid = np.pad(np.ones((h, w)), ((padding, padding), (padding, padding)))
    counts = sliding_window_view(valid, (size, size))[::stride, ::stride].sum(axis=(2, 3))
    counts = np.maximum(counts, 1.0)  # all-padding windows yield 0
    data = sums / counts

    def build():
        def grad(g):
            gw = g / counts
            gxp = np.zeros((n, c, hp, wp))
            for dh in range(size):
                for dw in range(size):
                    gxp[:, :, dh:dh + stride * ho:stride, dw:dw + stride * wo:stride] += gw
            return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

        return grad

    return _result(data, (x,), build, "pool2d")


def concat_channels(tensors) -> Tensor:
    """Concatenate [N, Ci, H, W] tensors along the channel axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(f"concat_channels shape mismatch: {s} vs {base}")
    data = np.concatenate([t.data for t in tensors], axis=1)

    def build():
        widths = [t.data.shape[1] for t in tensors]
        edges = np.cumsum([0] + widths)

        def grad(g):
            return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(widths)))

        return grad

    return _result(data, tuple(tensors), build, "concat_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [N, C, H, W] -> [N, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N, C, H, W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    data = x.data.mean(axis=(2, 3))

    def build():
        def grad(g):
            return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

        return grad

    return _result(data, (x,), build, "global_avg_pool")


def select_channel(x: Tensor, channel: int) -> Tensor:
    """Slice one channel: [N, C, H, W] -> [N, H, W]."""
    if x.data.ndim != 4:
        raise ShapeError(f"select_channel expects [N, C, H, W], got {x.data.shape}")
    if not 0 <= channel < x.data.shape[1]:
        raise ShapeError(f"channel {channel} out of range for {x.data.shape[1]} channels")
    data = x.data[:, channel]

    def build():
        shape = x.data.shape

        def grad(g):
            out = np.zeros(shape)
            out[:, channel] = g
            return (out,)

        return grad

    return _result(data, (x,), build, "select_channel")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under probability rows."""
    picked = gather_rows(probs, labels)
    n = picked.data.shape[0]
    return neg(sum_all(log(clamp(picked, LOG_EPS, 1.0)))) / n


def multilabel_bce(probs: Tensor, label_matrix) -> Tensor:
    """Per-example sum of binary cross-entropies, averaged over the batch."""
    y = _as_array(label_matrix)
    if y.shape != probs.data.shape:
        raise ShapeError(f"multilabel_bce labels {y.shape} do not match probs {probs.data.shape}")
    n = probs.data.shape[0]
    pos = mul(constant(y), log(clamp(probs, LOG_EPS, 1.0)))
    neg_term = mul(constant(1.0 - y), log(clamp(sub(constant(1.0), probs), LOG_EPS, 1.0)))
    return neg(sum_all(add(pos, neg_term))) / n


# ---------------------------------------------------------------------------
# real 2D FFT
# ---------------------------------------------------------------------------

def fft2(image: np.ndarray) -> np.ndarray:
    """Real-input 2D DFT, returning the Hermitian-redundant half spectrum.

    Input is [H, W] real; output is [H, W//2 + 1] complex128.
    """
    arr = _as_array(image)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"fft2 expects a 2-d image, got {arr.shape}")
    return np.fft.rfft2(arr)


def ifft2(spectrum: np.ndarray, width: int) -> np.ndarray:
    """Inverse of :func:`fft2`; ``width`` disambiguates even/odd image width."""
    spec = np.asarray(spectrum, dtype=np.complex128)
    if spec.ndim != 2:
        raise ShapeError(f"ifft2 expects a 2-d half spectrum, got {spec.shape}")
    if spec.shape[1] != width // 2 + 1:
        raise ShapeError(
            f"ifft2 half spectrum has {spec.shape[1]} columns, expected {width // 2 + 1} for width {width}"
        )
    return np.fft.irfft2(spec, s=(spec.shape[0], width))


def _mirror_indices(height: int, width: int):
    half = width // 2 + 1
    rows = np.concatenate(([0], np.arange(height - 1, 0, -1)))
    if width % 2 == 0:
        cols = np.arange(half - 2, 0, -1)   # skip DC and Nyquist columns
    else:
        cols = np.arange(half - 1, 0, -1)   # skip DC column only
    return rows, cols


def half_spectrum_to_image(params: Tensor, height: int, width: int) -> Tensor:
    """Differentiable inverse real FFT from free half-spectrum coefficients.

    ``params`` is [..., H, W//2+1, 2] with real and imaginary parts in the
    last axis.  The full spectrum is completed by Hermitian mirroring and
    the output is the real part of the inverse DFT, shape [..., H, W].
    """
    pd = params.data
    half = width // 2 + 1
    if pd.ndim < 3 or pd.shape[-3:] != (height, half, 2):
        raise ShapeError(
            f"half_spectrum_to_image expects [..., {height}, {half}, 2], got {pd.shape}"
        )
    rows, cols = _mirror_indices(height, width)
    z = pd[..., 0] + 1j * pd[..., 1]
    mirror = np.conj(z[..., rows, :][..., :, cols])
    full = np.concatenate([z, mirror], axis=-1)
    data = np.fft.ifft2(full, axes=(-2, -1)).real

    def build():
        def grad(g):
            gf = np.fft.fft2(g, axes=(-2, -1)) / (height * width)
            gz = gf[..., :half].copy()
            if cols.size:
                # mirrored entries contribute the conjugate of their twin's gradient
                back = np.conj(gf[..., half:][..., rows, :])
                gz[..., cols] += back
            out = np.empty_like(pd)
            out[..., 0] = gz.real
            out[..., 1] = gz.imag
            return (out,)

        return grad

    return _result(data, (params,), build, "half_spectrum_to_image")
