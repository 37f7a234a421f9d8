"""Illumination and semantic guidance maps, and their per-level adaptation.

The illumination prior is the inverted max-channel map of the input image;
a three-level pyramid of it matches the model's spatial resolutions. The
semantic prior is a 21-channel per-pixel class-probability map, either
loaded from an ISAT1 file (exported offline) or synthesized by a seeded
k-means over RGB so the pipeline runs with no external tooling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from . import tensor as T
from .errors import DataError

SEMANTIC_CLASSES = 21
SEMANTIC_RECORD = "semantic_prior"


@dataclass
class IlluminationPyramid:
    """Single-channel maps at full, half, and quarter resolution, in [0,1]."""

    levels: list[T.Tensor]

    def level(self, k: int) -> T.Tensor:
        if not 0 <= k < len(self.levels):
            raise DataError(f"pyramid level {k} out of range 0..{len(self.levels) - 1}")
        return self.levels[k]


@dataclass
class SemanticPrior:
    """Per-pixel probabilities over SEMANTIC_CLASSES channels, (C,H,W)."""

    map: T.Tensor


@dataclass
class PriorBundle:
    """Both priors for one batch, before channel adaptation."""

    pyramid: IlluminationPyramid  # levels are (N,1,H/2^k,W/2^k)
    semantic: T.Tensor  # (N,21,H,W)


def illumination_prior(image: T.Tensor) -> T.Tensor:
    """Inverted max-channel map: bright where the scene is dark.

    Accepts (3,H,W) or (N,3,H,W); the output keeps the rank with a single
    channel. Input values are clamped to [0,1] first.
    """
    arr = image.data if isinstance(image, T.Tensor) else np.asarray(image, dtype=np.float32)
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise DataError(f"illumination prior expects 3 channels, got shape {arr.shape}")
    clamped = np.clip(arr, 0.0, 1.0)
    out = (1.0 - clamped.max(axis=1, keepdims=True)).astype(np.float32)
    return T.Tensor(out if batched else out[0])


def build_pyramid(prior: T.Tensor) -> IlluminationPyramid:
    """Resample the full-resolution prior to factors 1, 1/2, and 1/4."""
    arr = prior.data
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise DataError(f"pyramid expects a single-channel map, got shape {prior.shape}")
    _, _, h, w = arr.shape
    if h % 4 or w % 4:
        raise DataError(
            f"pyramid needs extents divisible by 4, got {h}x{w}; pad the image first"
        )
    base = T.Tensor(arr)
    with T.no_grad():
        levels = [
            base,
            T.resize_bilinear(base, h // 2, w // 2),
            T.resize_bilinear(base, h // 4, w // 4),
        ]
    if not batched:
        levels = [T.Tensor(lv.data[0]) for lv in levels]
    return IlluminationPyramid(levels)


def _normalize_or_softmax(vals: np.ndarray) -> np.ndarray:
    """Treat near-normalized nonnegative maps as probabilities; else logits."""
    sums = vals.sum(axis=0, keepdims=True)
    if (vals >= 0).all() and np.abs(sums - 1.0).max() <= 1e-2:
        return (vals / sums).astype(np.float32)
    shifted = vals - vals.max(axis=0, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    return (e / e.sum(axis=0, keepdims=True)).astype(np.float32)


def load_semantic_prior(path: str) -> SemanticPrior:
    """Read a (21,H,W) map from an ISAT1 file and normalize it per pixel."""
    try:
        records = container.read_records(path)
    except container.ContainerError as exc:
        raise DataError(str(exc)) from exc
    if list(records.keys()) != [SEMANTIC_RECORD]:
        raise DataError(
            f"{path}: expected a single record named {SEMANTIC_RECORD!r}, got {list(records.keys())}"
        )
    vals = records[SEMANTIC_RECORD]
    if vals.ndim != 3 or vals.shape[0] != SEMANTIC_CLASSES:
        raise DataError(
            f"{path}: semantic prior must be {SEMANTIC_CLASSES}xHxW, got {vals.shape}"
        )
    if not np.isfinite(vals).all():
        raise DataError(f"{path}: semantic prior contains non-finite values")
    return SemanticPrior(T.Tensor(_normalize_or_softmax(vals.astype(np.float64))))


def save_semantic_prior(path: str, prior: SemanticPrior) -> None:
    container.write_records(path, {SEMANTIC_RECORD: prior.map.data})


def synthetic_semantic_prior(
    image: T.Tensor,
    classes: int = SEMANTIC_CLASSES,
    seed: int = 0,
    iterations: int = 10,
    temperature: float = 0.1,
) -> SemanticPrior:
    """Deterministic stand-in for a segmentation model.

    Clusters RGB values with seeded k-means, then soft-assigns each pixel by
    a softmax over negative distances to the cluster centers.
    """
    arr = image.data if isinstance(image, T.Tensor) else np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"synthetic prior expects a (3,H,W) image, got {arr.shape}")
    _, h, w = arr.shape
    pixels = arr.reshape(3, -1).T.astype(np.float64)  # (HW, 3)
    n = pixels.shape[0]
    rng = np.random.default_rng(seed)
    if n >= classes:
        centers = pixels[rng.choice(n, size=classes, replace=False)].copy()
    else:
        centers = pixels[rng.integers(0, n, size=classes)].copy()

    def distances_sq(c):
        return (
            (pixels**2).sum(axis=1, keepdims=True)
            - 2.0 * pixels @ c.T
            + (c**2).sum(axis=1)[None, :]
        )

    for _ in range(iterations):
        assign = distances_sq(centers).argmin(axis=1)
        sums = np.zeros((classes, 3))
        counts = np.zeros(classes)
        np.add.at(sums, assign, pixels)
        np.add.at(counts, assign, 1.0)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]

    d = np.sqrt(np.maximum(distances_sq(centers), 0.0))
    logits = -d / temperature
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    return SemanticPrior(T.Tensor(probs.T.reshape(classes, h, w).astype(np.float32)))


def synthetic_bundle(images: T.Tensor, seed: int = 0, **kwargs) -> PriorBundle:
    """Prior bundle for a batch using the synthetic semantic generator."""
    maps = [
        synthetic_semantic_prior(T.Tensor(images.data[i]), seed=seed, **kwargs).map.data
        for i in range(images.shape[0])
    ]
    return compute_priors(images, T.Tensor(np.stack(maps)))


def compute_priors(images: T.Tensor, semantic: T.Tensor) -> PriorBundle:
    """Assemble the batched prior bundle for a model forward."""
    if images.ndim != 4:
        raise DataError(f"compute_priors expects (N,3,H,W) images, got {images.shape}")
    if semantic.ndim != 4 or semantic.shape[1] != SEMANTIC_CLASSES:
        raise DataError(
            f"compute_priors expects (N,{SEMANTIC_CLASSES},H,W) semantics, got {semantic.shape}"
        )
    if semantic.shape[2:] != images.shape[2:] or semantic.shape[0] != images.shape[0]:
        raise DataError(
            f"semantic map extents {semantic.shape} do not match images {images.shape}"
        )
    return PriorBundle(build_pyramid(illumination_prior(images)), semantic)


class PriorAdapter:
    """Projects both priors to one level's channel width.

    Illumination levels already sit at the right resolution, so a 1x1 conv
    only adjusts depth. The semantic map stays at full resolution and is
    brought down by a strided 3x3 conv (stride 2^level).
    """

    def __init__(self, store: T.ParamStore, prefix: str, level: int, base_channels: int, rng: np.random.Generator):
        if level not in (0, 1, 2):
            raise DataError(f"prior adapter level must be 0..2, got {level}")
        self.level = level
        width = base_channels * (2**level)
        self.width = width
        self.illum_kernel = store.add(f"{prefix}.illum.kernel", T.conv_init(rng, width, 1, 1, 1))
        self.illum_bias = store.add(f"{prefix}.illum.bias", np.zeros(width, dtype=np.float32))
        self.sem_kernel = store.add(
            f"{prefix}.sem.kernel", T.conv_init(rng, width, SEMANTIC_CLASSES, 3, 3)
        )
        self.sem_bias = store.add(f"{prefix}.sem.bias", np.zeros(width, dtype=np.float32))

    def adapt(self, bundle: PriorBundle) -> tuple[T.Tensor, T.Tensor]:
        illum = T.conv2d(bundle.pyramid.level(self.level), self.illum_kernel, bias=self.illum_bias)
        sem = T.conv2d(
            bundle.semantic, self.sem_kernel, stride=2**self.level, padding=1, bias=self.sem_bias
        )
        if illum.shape != sem.shape:
            raise DataError(
                f"adapted prior extents disagree: illumination {illum.shape} vs semantic {sem.shape}"
            )
        return illum, sem
