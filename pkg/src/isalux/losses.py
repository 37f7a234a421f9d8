"""Hybrid training loss (L2 + perceptual + MS-SSIM) and evaluation metrics.

The perceptual term compares activations from a frozen four-stage conv
extractor. By default the extractor weights come from a fixed seed (random
deep features as a desk-scale perceptual proxy); real exported weights can
be loaded from an ISAT1 file with records stage{i}.kernel / stage{i}.bias.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, valid windows).
MS-SSIM combines the contrast-structure term at all scales with the full
SSIM at the last (coarsest) scale, exponent-weighted per scale. Metrics run
on Rec.601 luma; the loss path averages over all channels.
"""
from __future__ import annotations

import math

import numpy as np

from . import container
from . import tensor as T
from .errors import DataError

EXTRACTOR_SEED = 0xC0FFEE
EXTRACTOR_WIDTHS = (64, 128, 256, 512)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 99.0


def l2_loss(pred: T.Tensor, target: T.Tensor) -> T.Tensor:
    """Mean squared difference over all elements."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"l2_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = T.sub(pred, target)
    return T.tmean(T.mul(diff, diff))


class FeatureExtractor:
    """Frozen conv stack: four (conv3x3 stride 2 + GELU) stages with taps."""

    RECORD_NAMES = [f"stage{i}" for i in range(4)]

    def __init__(self, weights_path: str = "", seed: int = EXTRACTOR_SEED):
        self.kernels: list[T.Tensor] = []
        self.biases: list[T.Tensor] = []
        if weights_path:
            records = container.read_records(weights_path)
            cin = 3
            for i, width in enumerate(EXTRACTOR_WIDTHS):
                kname, bname = f"stage{i}.kernel", f"stage{i}.bias"
                if kname not in records or bname not in records:
                    raise DataError(f"{weights_path}: missing extractor record {kname}/{bname}")
                k, b = records[kname], records[bname]
                if k.shape != (width, cin, 3, 3) or b.shape != (width,):
                    raise DataError(
                        f"{weights_path}: {kname} has shape {k.shape}, expected {(width, cin, 3, 3)}"
                    )
                self.kernels.append(T.Tensor(k))
                self.biases.append(T.Tensor(b))
                cin = width
        else:
            rng = np.random.default_rng(seed)
            cin = 3
            for width in EXTRACTOR_WIDTHS:
                self.kernels.append(T.Tensor(T.conv_init(rng, width, cin, 3, 3)))
                self.biases.append(T.Tensor(np.zeros(width, dtype=np.float32)))
                cin = width

    def features(self, x: T.Tensor) -> list[T.Tensor]:
        taps = []
        for k, b in zip(self.kernels, self.biases):
            x = T.gelu(T.conv2d(x, k, stride=2, padding=1, bias=b))
            taps.append(x)
        return taps


def perceptual_loss(pred: T.Tensor, target: T.Tensor, extractor: FeatureExtractor) -> T.Tensor:
    """Mean L1 distance between tap activations, averaged over taps."""
    taps_p = extractor.features(pred)
    with T.no_grad():
        taps_t = extractor.features(target.detach())
    total = None
    for fp, ft in zip(taps_p, taps_t):
        term = T.tmean(T.tabs(T.sub(fp, T.Tensor(ft.data))))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(taps_p))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return (win / win.sum()).astype(np.float32)


def _depthwise_filter(x: T.Tensor, window: T.Tensor) -> T.Tensor:
    n, c, h, w = x.shape
    flat = T.reshape(x, (n * c, 1, h, w))
    filtered = T.conv2d(flat, window)
    _, _, oh, ow = filtered.shape
    return T.reshape(filtered, (n, c, oh, ow))


def _ssim_terms(a: T.Tensor, b: T.Tensor, window: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
    """Mean SSIM and mean contrast-structure over all valid windows."""
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    mu_a = _depthwise_filter(a, window)
    mu_b = _depthwise_filter(b, window)
    mu_aa = T.mul(mu_a, mu_a)
    mu_bb = T.mul(mu_b, mu_b)
    mu_ab = T.mul(mu_a, mu_b)
    var_a = T.sub(_depthwise_filter(T.mul(a, a), window), mu_aa)
    var_b = T.sub(_depthwise_filter(T.mul(b, b), window), mu_bb)
    cov = T.sub(_depthwise_filter(T.mul(a, b), window), mu_ab)
    two = T.Tensor(np.float32(2.0))
    c1t = T.Tensor(np.float32(c1))
    c2t = T.Tensor(np.float32(c2))
    lum = T.div(
        T.add(T.mul(two, mu_ab), c1t),
        T.add(T.add(mu_aa, mu_bb), c1t),
    )
    cs = T.div(
        T.add(T.mul(two, cov), c2t),
        T.add(T.add(var_a, var_b), c2t),
    )
    return T.tmean(T.mul(lum, cs)), T.tmean(cs)


def ssim(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Single-scale SSIM over all channels (differentiable scalar)."""
    if a.shape != b.shape:
        raise T.ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DataError(f"ssim needs extents >= {SSIM_WINDOW}, got {a.shape}")
    window = T.Tensor(_gaussian_window().reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW))
    full, _ = _ssim_terms(a, b, window)
    return full


def max_msssim_scales(h: int, w: int) -> int:
    m = 0
    while min(h, w) >= SSIM_WINDOW:
        m += 1
        h //= 2
        w //= 2
    return m


def ms_ssim(pred: T.Tensor, target: T.Tensor, scales: int, alphas) -> T.Tensor:
    """Multi-scale SSIM in [0,1]-ish: contrast-structure at every scale,
    full SSIM at the last, combined as an exponent-weighted product."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"ms_ssim shapes differ: {pred.shape} vs {target.shape}")
    if len(alphas) != scales:
        raise DataError(f"ms_ssim got {len(alphas)} exponents for {scales} scales")
    h, w = pred.shape[-2:]
    feasible = max_msssim_scales(h, w)
    if scales < 1 or scales > feasible:
        raise DataError(
            f"image {h}x{w} supports at most {feasible} scales "
            f"(needs extents >= {SSIM_WINDOW}*2^(M-1)), got M={scales}"
        )
    window = T.Tensor(_gaussian_window().reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW))
    big = T.Tensor(np.float32(1e9))
    result = None
    a, b = pred, target
    for j in range(scales):
        full, cs = _ssim_terms(a, b, window)
        term = full if j == scales - 1 else cs
        term = T.clamp(term, 1e-6, 1e9)
        factor = T.powf(term, float(alphas[j]))
        result = factor if result is None else T.mul(result, factor)
        if j != scales - 1:
            hh, ww = a.shape[-2], a.shape[-1]
            a = T.resize_bilinear(a, hh // 2, ww // 2)
            b = T.resize_bilinear(b, hh // 2, ww // 2)
    return result


def ms_ssim_loss(pred: T.Tensor, target: T.Tensor, scales: int, alphas) -> T.Tensor:
    return T.sub(T.Tensor(np.float32(1.0)), ms_ssim(pred, target, scales, alphas))


def hybrid_loss(pred, target, cfg, extractor: FeatureExtractor | None = None):
    """Weighted sum of the three terms; returns (scalar, component floats)."""
    parts = {"l2": 0.0, "perc": 0.0, "msssim": 0.0}
    total = None

    def accumulate(term, weight):
        nonlocal total
        scaled = T.scale(term, weight)
        total = scaled if total is None else T.add(total, scaled)

    if cfg.lambda_l2 > 0:
        term = l2_loss(pred, target)
        parts["l2"] = term.item()
        accumulate(term, cfg.lambda_l2)
    if cfg.lambda_perc > 0:
        if extractor is None:
            raise DataError("perceptual loss weight set but no extractor provided")
        term = perceptual_loss(pred, target, extractor)
        parts["perc"] = term.item()
        accumulate(term, cfg.lambda_perc)
    if cfg.lambda_ssim > 0:
        term = ms_ssim_loss(pred, target, cfg.msssim_scales, cfg.resolved_msssim_alphas())
        parts["msssim"] = term.item()
        accumulate(term, cfg.lambda_ssim)
    return total, parts


# ---------------------------------------------------------------------------
# evaluation metrics (no gradients)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def to_luma(arr: np.ndarray) -> np.ndarray:
    """(N,3,H,W) -> (N,1,H,W) Rec.601 luma."""
    r, g, b = LUMA_WEIGHTS
    return (r * arr[:, 0] + g * arr[:, 1] + b * arr[:, 2])[:, None].astype(np.float32)


def _as_batched(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    return arr if arr.ndim == 4 else arr[None]


def psnr(pred, target, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; identical pairs report the 99 dB cap."""
    p = np.clip(_as_batched(pred if not isinstance(pred, T.Tensor) else pred.data), 0.0, 1.0)
    t = _as_batched(target if not isinstance(target, T.Tensor) else target.data)
    if p.shape != t.shape:
        raise T.ShapeError(f"psnr shapes differ: {p.shape} vs {t.shape}")
    mse = float(np.mean((p.astype(np.float64) - t.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def ssim_metric(pred, target) -> float:
    """Single-scale SSIM on luma."""
    p = _as_batched(pred if not isinstance(pred, T.Tensor) else pred.data)
    t = _as_batched(target if not isinstance(target, T.Tensor) else target.data)
    with T.no_grad():
        return ssim(T.Tensor(to_luma(np.clip(p, 0, 1))), T.Tensor(to_luma(t))).item()


def msssim_metric(pred, target, scales: int | None = None) -> float:
    """MS-SSIM on luma; scales default to min(5, feasible for the extent)."""
    p = _as_batched(pred if not isinstance(pred, T.Tensor) else pred.data)
    t = _as_batched(target if not isinstance(target, T.Tensor) else target.data)
    h, w = p.shape[-2:]
    if scales is None:
        scales = min(5, max_msssim_scales(h, w))
    prefix = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333][:scales])
    alphas = (prefix / prefix.sum()).tolist()
    with T.no_grad():
        return ms_ssim(
            T.Tensor(to_luma(np.clip(p, 0, 1))), T.Tensor(to_luma(t)), scales, alphas
        ).item()
