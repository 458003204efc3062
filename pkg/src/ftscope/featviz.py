"""Activation maximization with an FFT image parameterization.

Images are parameterized as per-channel half-spectrum coefficients, scaled
by inverse frequency (pink-spectrum energy normalization), inverse-FFT'd,
mapped through a color decorrelation matrix and squashed by a sigmoid.
Momentum gradient ascent with a normalized gradient direction maximizes
the spatial mean of a channel's pre-activation response; per-coordinate
adaptive optimizers saturate minority pixels irrecoverably under the
sigmoid and stall well short of the objective's box-constrained optimum.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

import ftscope.tensor as T
from ftscope import model as M
from ftscope.data import Dataset

DEFAULT_STEPS = 512          # desk-scale default; the reference protocol used 2048
DEFAULT_STEP_SIZE = 0.05
INIT_STD = 0.01
RANDOM_BASELINE_COUNT = 16


class FeatvizError(RuntimeError):
    """Invalid visualization request or aborted optimization."""


@dataclass
class SpectralParams:
    coeffs: np.ndarray     # [3, H, W//2+1, 2] free real/imaginary coefficients
    height: int
    width: int

    def __post_init__(self):
        half = self.width // 2 + 1
        expect = (3, self.height, half, 2)
        if self.coeffs.shape != expect:
            raise FeatvizError(f"coefficients shape {self.coeffs.shape}, expected {expect}")
        if not np.all(np.isfinite(self.coeffs)):
            raise FeatvizError("non-finite spectral coefficients")


@dataclass
class DecorrelationMatrix:
    matrix: np.ndarray     # 3x3, maps decorrelated coordinates to RGB
    provenance: str
    scale: float = 1.0     # max singular value of the raw Cholesky factor

    @property
    def raw_factor(self) -> np.ndarray:
        """Unscaled Cholesky factor: raw_factor @ raw_factor.T == pixel covariance."""
        return self.matrix * self.scale


@dataclass
class OptimizedImage:
    params: SpectralParams
    image: np.ndarray      # [3, H, W] in (0, 1)
    trace: list            # objective value at init and after every step
    channel: tuple         # (layer, index)
    steps: int

    def write_trace(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "objective"])
            for i, v in enumerate(self.trace):
                writer.writerow([i, f"{v:.12g}"])


def identity_decorrelation(provenance: str = "identity") -> DecorrelationMatrix:
    return DecorrelationMatrix(matrix=np.eye(3), provenance=provenance, scale=1.0)


def fit_decorrelation(dataset: Dataset, split: str = "train") -> DecorrelationMatrix:
    """Cholesky factor of the pooled RGB pixel covariance, max singular value 1.

    Falls back to the identity with a warning when the covariance is
    singular (e.g. grayscale data).  Statistically meaningful from a few
    hundred pixels up; accepts any input with at least two pixels.
    """
    ids = dataset.split_ids(split)
    if not ids:
        raise FeatvizError(f"split {split!r} is empty")
    pixels = np.concatenate([dataset.images[i].reshape(3, -1) for i in ids], axis=1)
    if pixels.shape[1] < 2:
        raise FeatvizError("need at least two pixels to estimate a covariance")
    cov = np.cov(pixels, ddof=1)
    provenance = f"{dataset.name}:{split}"
    eigs = np.linalg.eigvalsh(cov)
    if eigs[0] <= 1e-12 * max(eigs[-1], 1e-300):
        warnings.warn("singular pixel covariance; falling back to identity decorrelation",
                      stacklevel=2)
        return identity_decorrelation(provenance)
    factor = np.linalg.cholesky(cov)
    smax = float(np.linalg.svd(factor, compute_uv=False)[0])
    return DecorrelationMatrix(matrix=factor / smax, provenance=provenance, scale=smax)


def frequency_scale(height: int, width: int) -> np.ndarray:
    """Per-bin coefficient scale 1/max(f, 1/max(H, W)) over the half spectrum."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    f = np.sqrt(fy ** 2 + fx ** 2)
    return 1.0 / np.maximum(f, 1.0 / max(height, width))


def random_params(height: int, width: int, seed: int) -> SpectralParams:
    rng = np.random.default_rng(seed)
    coeffs = rng.normal(0.0, INIT_STD, size=(3, height, width // 2 + 1, 2))
    return SpectralParams(coeffs=coeffs, height=height, width=width)


def _decode_graph(coeffs: T.Tensor, height: int, width: int,
                  decorrelation: DecorrelationMatrix) -> T.Tensor:
    scale = frequency_scale(height, width)[None, :, :, None]
    scaled = T.mul(coeffs, T.constant(scale))
    spatial = T.half_spectrum_to_image(scaled, height, width)
    rgb = T.color_transform(spatial, decorrelation.matrix)
    return T.sigmoid(rgb)


def decode(params: SpectralParams, decorrelation: DecorrelationMatrix) -> np.ndarray:
    """Deterministic spectral-to-RGB decode; output strictly inside (0, 1)."""
    return _decode_graph(T.Tensor(params.coeffs), params.height, params.width,
                         decorrelation).data


def channel_objective(model: M.ModelCheckpoint, channel: tuple,
                      image: T.Tensor) -> T.Tensor:
    """Spatial mean of a channel's pre-activation response to one image."""
    layer, index = channel
    if layer not in M.canonical_layers(model.spec):
        raise FeatvizError(f"unknown layer {layer!r}")
    batch = T.reshape(image, (1,) + image.shape)
    out = M.run_graph(model.spec, {k: T.Tensor(v) for k, v in model.params.items()},
                      batch, capture_pre={layer}, stop_after=layer)
    pre = out["pre"][layer]
    if not 0 <= index < pre.shape[1]:
        raise FeatvizError(f"channel {index} out of range for layer {layer} "
                           f"with {pre.shape[1]} channels")
    return T.mean_all(T.select_channel(pre, index))


def _objective_of(model, channel, coeffs_tensor, size, decorrelation):
    image = _decode_graph(coeffs_tensor, size, size, decorrelation)
    return channel_objective(model, channel, image)


def optimize_channel(model: M.ModelCheckpoint, channel: tuple,
                     decorrelation: DecorrelationMatrix,
                     steps: int = DEFAULT_STEPS,
                     step_size: float = DEFAULT_STEP_SIZE,
                     seed: int = 0) -> OptimizedImage:
    """Gradient-ascend the channel objective over spectral parameters.

    Ascent direction is the momentum-averaged unit gradient, stepped at
    ``step_size`` per iteration; the trace records the objective at the
    initial parameters and after every step (length steps + 1).
    """
    if steps < 0:
        raise FeatvizError("steps must be >= 0")
    size = model.spec.input_size
    params = random_params(size, size, seed)
    coeffs = params.coeffs.copy()
    momentum = np.zeros_like(coeffs)
    trace = []
    try:
        for step in range(steps + 1):
            tape = T.Tape()
            leaf = tape.leaf(coeffs)
            objective = _objective_of(model, channel, leaf, size, decorrelation)
            trace.append(objective.item())
            if step == steps:
                break
            grads = T.backward(tape, objective)
            g = grads[leaf.node]
            momentum = 0.9 * momentum + g / (np.linalg.norm(g) + 1e-12)
            coeffs = coeffs + step_size * momentum
    except T.NonFiniteError as e:
        raise FeatvizError(f"non-finite objective at step {len(trace)}: {e}") from e
    final = SpectralParams(coeffs=coeffs, height=size, width=size)
    return OptimizedImage(params=final, image=decode(final, decorrelation),
                          trace=trace, channel=channel, steps=steps)


def random_baseline(model: M.ModelCheckpoint, channel: tuple,
                    decorrelation: DecorrelationMatrix,
                    count: int = RANDOM_BASELINE_COUNT, seed: int = 0) -> float:
    """Mean channel objective over decoded random initializations."""
    size = model.spec.input_size
    values = []
    for i in range(count):
        params = random_params(size, size, seed * 1000 + i)
        objective = _objective_of(model, channel, T.Tensor(params.coeffs),
                                  size, decorrelation)
        values.append(objective.item())
    return float(np.mean(values))
