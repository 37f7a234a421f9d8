"""Optimization loop: Adam, the rise-then-decay learning-rate schedule,
seeded patch sampling with paired augmentation, checkpointing, resume.

Batch RNG is derived from (seed, iteration), so the batch at iteration j
never depends on history; resuming from a checkpoint reproduces the exact
trajectory of an uninterrupted run.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses as L
from . import model as Mo
from . import priors as P
from . import tensor as T
from .errors import DataError, NumericError
from .imageio import load_png

# (iteration, lr) anchors at the reference 300k-iteration scale; other
# training lengths rescale the anchor iterations proportionally
REFERENCE_TOTAL_ITERS = 300_000
REFERENCE_LR_ANCHORS = ((0, 2e-4), (92_000, 3e-4), (208_000, 2e-4), (300_000, 1e-6))


@dataclass
class LrSchedule:
    anchors: list  # [(iter, lr)], strictly increasing iters

    def __post_init__(self):
        its = [a[0] for a in self.anchors]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise DataError(f"schedule anchors must be strictly increasing, got {its}")
        if any(lr <= 0 for _, lr in self.anchors):
            raise DataError("schedule learning rates must be positive")

    @classmethod
    def reference_shape(cls, total_iters: int, multiplier: float = 1.0) -> "LrSchedule":
        """Reference anchors rescaled proportionally to total_iters.

        At very small totals the rounded interior anchors can collide; they
        are then bumped forward or dropped so iterations stay increasing.
        """
        scale = total_iters / REFERENCE_TOTAL_ITERS
        scaled = [(int(round(it * scale)), lr * multiplier) for it, lr in REFERENCE_LR_ANCHORS]
        first, last = scaled[0], scaled[-1]
        anchors = [first]
        for it, lr in scaled[1:-1]:
            it = max(it, anchors[-1][0] + 1)
            if it < last[0]:
                anchors.append((it, lr))
        anchors.append(last)
        return cls(anchors)

    def lr_at(self, iteration: int) -> float:
        a = self.anchors
        if iteration <= a[0][0]:
            return a[0][1]
        if iteration >= a[-1][0]:
            return a[-1][1]
        for (i0, lr0), (i1, lr1) in zip(a, a[1:]):
            if iteration == i0:
                return lr0
            if i0 < iteration < i1:
                t = (iteration - i0) / (i1 - i0)
                return lr0 + t * (lr1 - lr0)
        return a[-1][1]


class AdamState:
    """First/second moments per parameter plus the shared step count."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adam_step(store: T.ParamStore, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update; missing gradients count as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in store.named():
        g = p.grad
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        g64 = np.zeros(p.shape, dtype=np.float64) if g is None else g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m64 = (b1 * m + (1 - b1) * g64) if m is not None else (1 - b1) * g64
        v64 = (b2 * v + (1 - b2) * g64 * g64) if v is not None else (1 - b2) * g64 * g64
        state.m[name] = m64.astype(np.float32)
        state.v[name] = v64.astype(np.float32)
        update = lr * (state.m[name].astype(np.float64) / c1) / (
            np.sqrt(state.v[name].astype(np.float64) / c2) + state.eps
        )
        p.data[...] = (p.data.astype(np.float64) - update).astype(np.float32)


def clip_global_norm(store: T.ParamStore, max_norm: float) -> float:
    total = 0.0
    for _, p in store.named():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = np.float32(max_norm / norm)
        for _, p in store.named():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# data pipeline


def augment(arr: np.ndarray, rot_k: int, flip: bool) -> np.ndarray:
    """Rotate by rot_k*90 degrees counterclockwise, then optional horizontal
    flip; operates on (C,H,W) and is applied identically to every stream."""
    out = np.rot90(arr, k=rot_k, axes=(1, 2))
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


@dataclass
class PairedImage:
    name: str
    low: np.ndarray  # (3,H,W)
    high: np.ndarray
    semantic: np.ndarray  # (21,H,W)


class PatchSampler:
    """Aligned random crops plus identical augmentation of all streams."""

    def __init__(self, pairs: list[PairedImage], patch: int, batch: int, seed: int, augment_enabled: bool = True):
        if not pairs:
            raise DataError("no usable training pairs")
        self.patch = patch
        self.batch = batch
        self.seed = seed
        self.augment_enabled = augment_enabled
        self.pairs = []
        for pair in pairs:
            if pair.low.shape[1] < patch or pair.low.shape[2] < patch:
                warnings.warn(
                    f"{pair.name}: image {pair.low.shape[1:]} smaller than patch {patch}, skipped"
                )
                continue
            self.pairs.append(pair)
        if not self.pairs:
            raise DataError(f"every training image is smaller than patch size {patch}")

    def sample(self, iteration: int):
        """Batch for one iteration: (low, high, semantic) f32 arrays."""
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(iteration,)))
        lows, highs, sems = [], [], []
        for _ in range(self.batch):
            pair = self.pairs[int(rng.integers(0, len(self.pairs)))]
            _, h, w = pair.low.shape
            y = int(rng.integers(0, h - self.patch + 1))
            x = int(rng.integers(0, w - self.patch + 1))
            rot_k = int(rng.integers(0, 4)) if self.augment_enabled else 0
            flip = bool(rng.integers(0, 2)) if self.augment_enabled else False
            sl = (slice(None), slice(y, y + self.patch), slice(x, x + self.patch))
            lows.append(augment(pair.low[sl], rot_k, flip))
            highs.append(augment(pair.high[sl], rot_k, flip))
            sems.append(augment(pair.semantic[sl], rot_k, flip))
        return np.stack(lows), np.stack(highs), np.stack(sems)


def load_pairs(data_dir: str, seed: int = 0) -> list[PairedImage]:
    """Read <data_dir>/low and /high matched by filename; semantic priors
    from <data_dir>/priors/<name>.isat when present, else synthesized."""
    root = Path(data_dir)
    low_dir, high_dir, prior_dir = root / "low", root / "high", root / "priors"
    if not low_dir.is_dir() or not high_dir.is_dir():
        raise DataError(f"{data_dir}: expected low/ and high/ subdirectories")
    pairs = []
    low_files = sorted(low_dir.glob("*.png"))
    if not low_files:
        raise DataError(f"{low_dir}: no PNG files")
    for idx, low_path in enumerate(low_files):
        high_path = high_dir / low_path.name
        if not high_path.exists():
            raise DataError(f"{high_path}: missing normal-light counterpart of {low_path.name}")
        low = load_png(str(low_path))
        high = load_png(str(high_path))
        if low.shape != high.shape:
            raise DataError(
                f"{low_path.name}: low {low.shape[1:]} and high {high.shape[1:]} extents differ"
            )
        prior_path = prior_dir / (low_path.stem + ".isat")
        if prior_path.exists():
            sem = P.load_semantic_prior(str(prior_path)).map.data
            if sem.shape[1:] != low.shape[1:]:
                raise DataError(
                    f"{prior_path.name}: prior extents {sem.shape[1:]} != image {low.shape[1:]}"
                )
        else:
            sem = P.synthetic_semantic_prior(T.Tensor(low), seed=seed + idx).map.data
        pairs.append(PairedImage(low_path.stem, low, high, sem))
    return pairs


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    checkpoint: str
    log_path: str
    last_parts: dict
    iterations_run: int


def _adam_extras(state: AdamState) -> dict[str, np.ndarray]:
    extras = {"adam.step": np.array([state.step], dtype=np.float32)}
    for name, m in state.m.items():
        extras[f"adam.m.{name}"] = m
    for name, v in state.v.items():
        extras[f"adam.v.{name}"] = v
    return extras


def _restore_adam(records: dict[str, np.ndarray], store: T.ParamStore) -> AdamState:
    state = AdamState()
    state.step = int(records["adam.step"][0])
    for name, p in store.named():
        state.m[name] = records[f"adam.m.{name}"].reshape(p.shape).copy()
        state.v[name] = records[f"adam.v.{name}"].reshape(p.shape).copy()
    return state


def train(cfg: Mo.ModelConfig, data_dir: str, out_dir: str, resume: str | None = None, echo=print) -> TrainResult:
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.csv"

    if resume:
        model, extras = Mo.build_from_checkpoint(resume)
        if model.cfg != cfg:
            raise DataError("resume checkpoint config differs from requested config")
        state = _restore_adam(extras, model.store)
        start = state.step
        log_mode = "a"
    else:
        model = Mo.IsaT(cfg)
        state = AdamState()
        start = 0
        log_mode = "w"

    extractor = L.FeatureExtractor(cfg.extractor_weights) if cfg.lambda_perc > 0 else None
    pairs = load_pairs(data_dir, seed=cfg.seed)
    sampler = PatchSampler(pairs, cfg.patch_size, cfg.batch_size, cfg.seed, cfg.augment)
    schedule = LrSchedule.reference_shape(cfg.iterations, cfg.lr_multiplier)

    last_parts: dict = {}
    ckpt_path = str(out / "ckpt_final.isat")
    with open(log_path, log_mode, newline="") as log_file:
        log = csv.writer(log_file)
        if log_mode == "w":
            log.writerow(["iter", "lr", "l2", "perc", "msssim", "total"])
        for it in range(start, cfg.iterations):
            low, high, sem = sampler.sample(it)
            T.reset_tape()
            model.store.zero_grad()
            low_t = T.Tensor(low)
            bundle = P.compute_priors(low_t, T.Tensor(sem))
            pred = model.forward(low_t, bundle, training=True)
            loss, parts = L.hybrid_loss(pred, T.Tensor(high), cfg, extractor)
            total = loss.item()
            if not np.isfinite(total):
                log.writerow([it, schedule.lr_at(it), parts["l2"], parts["perc"], parts["msssim"], total])
                raise NumericError(f"non-finite loss at iteration {it}; batch from seed ({cfg.seed},{it})")
            T.backward(loss)
            if cfg.clip_grad_norm > 0:
                clip_global_norm(model.store, cfg.clip_grad_norm)
            lr = schedule.lr_at(it)
            adam_step(model.store, state, lr)
            parts["total"] = total
            last_parts = parts
            log.writerow([it, repr(lr), repr(parts["l2"]), repr(parts["perc"]), repr(parts["msssim"]), repr(total)])
            if (it + 1) % cfg.checkpoint_every == 0 or (it + 1) == cfg.iterations:
                ckpt_path = str(out / f"ckpt_{it + 1:06d}.isat")
                Mo.save_checkpoint(ckpt_path, model, extras=_adam_extras(state))
                echo(f"iter {it + 1}/{cfg.iterations} lr {lr:.2e} total {total:.5f} -> {ckpt_path}")
    return TrainResult(ckpt_path, str(log_path), last_parts, cfg.iterations - start)
