"""The U-shaped encoder/bottleneck/decoder transformer (ISA-T).

Two encoder levels halve resolution and double width, a bottleneck works at
quarter resolution and 4x width, and the decoder mirrors the encoder with
skip fusion at each level. Both priors are injected into every transformer
block at the matching resolution. A global residual adds the input image to
the refinement, so a zero-initialized output head makes the model an exact
identity.
"""
from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass

import numpy as np

from . import configfile
from . import container
from . import tensor as T
from .attention import HisaMsa
from .errors import DataError
from .moe import MoeFfn
from .priors import PriorAdapter, PriorBundle

STANDARD_MSSSIM_ALPHAS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class ModelConfig:
    """Every knob of the model, loss, and trainer; stored in checkpoints."""

    base_channels: int = 16
    blocks: tuple = (1, 2, 2)  # enc0, enc1, bottleneck; decoder mirrors
    lora_rank: int = 4
    lora_alpha_std: float = 0.02
    num_experts: int = 4
    top_k: int = 2
    expert_expansion: float = 2.0
    moe_renormalize: bool = False
    heads_base: int = 1
    fusion_init_illum: float = 1.0
    fusion_init_sem: float = 0.1
    use_illum: bool = True
    use_seg: bool = True
    use_lora: bool = True
    lambda_l2: float = 1.0
    lambda_perc: float = 0.01
    lambda_ssim: float = 0.2
    msssim_scales: int = 3
    msssim_alphas: tuple = ()  # empty -> standard weights for msssim_scales
    iterations: int = 2000
    patch_size: int = 64
    batch_size: int = 2
    checkpoint_every: int = 500
    clip_grad_norm: float = 1.0  # 0 disables clipping
    lr_multiplier: float = 1.0
    augment: bool = True
    seed: int = 0
    extractor_weights: str = ""

    def validate(self) -> "ModelConfig":
        c = self.base_channels
        if c < 1 or len(self.blocks) != 3 or any(b < 1 for b in self.blocks):
            raise DataError(f"blocks must be three counts >= 1, got {self.blocks}")
        max_heads = self.heads_base * 4  # bottleneck level doubles twice
        if self.heads_base < 1 or c % max_heads != 0:
            raise DataError(
                f"base_channels {c} must be divisible by the max head count {max_heads}"
            )
        if self.lora_rank < 1 or c % self.lora_rank != 0:
            raise DataError(f"lora_rank {self.lora_rank} must divide base_channels {c}")
        if self.top_k < 1 or self.top_k > self.num_experts:
            raise DataError(f"top_k {self.top_k} must be in 1..{self.num_experts}")
        if max(self.lambda_l2, self.lambda_perc, self.lambda_ssim) <= 0:
            raise DataError("at least one loss weight must be positive")
        if min(self.lambda_l2, self.lambda_perc, self.lambda_ssim) < 0:
            raise DataError("loss weights must be nonnegative")
        alphas = self.resolved_msssim_alphas()
        if len(alphas) != self.msssim_scales:
            raise DataError(
                f"msssim_alphas has {len(alphas)} entries for {self.msssim_scales} scales"
            )
        if self.patch_size % 4 or self.patch_size < 8:
            raise DataError(f"patch_size must be a multiple of 4 and >= 8, got {self.patch_size}")
        for name in ("iterations", "batch_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        return self

    def resolved_msssim_alphas(self) -> tuple:
        if self.msssim_alphas:
            return tuple(float(a) for a in self.msssim_alphas)
        m = self.msssim_scales
        prefix = np.array(STANDARD_MSSSIM_ALPHAS[:m], dtype=np.float64)
        return tuple((prefix / prefix.sum()).tolist()) if m != 5 else STANDARD_MSSSIM_ALPHAS

    def heads_at(self, level: int) -> int:
        return self.heads_base * (2**level)

    def width_at(self, level: int) -> int:
        return self.base_channels * (2**level)

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_flat(cls, values: dict) -> "ModelConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = [k for k in values if k not in known]
        if unknown:
            raise DataError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, v in values.items():
            default = getattr(cls, name)
            if isinstance(default, tuple) or name in ("blocks", "msssim_alphas"):
                if not isinstance(v, (list, tuple)):
                    raise DataError(f"config key {name} must be an array")
                kwargs[name] = tuple(v)
            elif isinstance(default, bool):
                if not isinstance(v, bool):
                    raise DataError(f"config key {name} must be true/false")
                kwargs[name] = v
            elif isinstance(default, int):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise DataError(f"config key {name} must be an integer")
                kwargs[name] = v
            elif isinstance(default, float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise DataError(f"config key {name} must be a number")
                kwargs[name] = float(v)
            else:
                if not isinstance(v, str):
                    raise DataError(f"config key {name} must be a string")
                kwargs[name] = v
        return cls(**kwargs).validate()

    def to_text(self) -> str:
        return configfile.serialize(self.to_flat())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_flat(configfile.parse(text))


class TransformerBlock:
    """Attention and expert-FFN sublayers in post-norm residual composition:
    x' = x + LN(attn(x)); out = x' + LN(ffn(x'))."""

    def __init__(self, store: T.ParamStore, prefix: str, channels: int, heads: int, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.attn = HisaMsa(
            store,
            f"{prefix}.attn",
            channels,
            heads,
            cfg.lora_rank,
            rng,
            fusion_init=(cfg.fusion_init_illum, cfg.fusion_init_sem),
            lora_alpha_std=cfg.lora_alpha_std,
        )
        self.ln1_scale = store.add(f"{prefix}.ln1.scale", np.ones(channels, dtype=np.float32))
        self.ln1_shift = store.add(f"{prefix}.ln1.shift", np.zeros(channels, dtype=np.float32))
        self.moe = MoeFfn(
            store, f"{prefix}.moe", channels, cfg.num_experts, cfg.top_k, cfg.expert_expansion, rng
        )
        self.ln2_scale = store.add(f"{prefix}.ln2.scale", np.ones(channels, dtype=np.float32))
        self.ln2_shift = store.add(f"{prefix}.ln2.shift", np.zeros(channels, dtype=np.float32))

    def forward(self, x: T.Tensor, f_pi: T.Tensor, f_ps: T.Tensor) -> T.Tensor:
        cfg = self.cfg
        a = self.attn.forward(
            x, f_pi, f_ps, use_lora=cfg.use_lora, use_illum=cfg.use_illum, use_seg=cfg.use_seg
        )
        x = T.add(x, T.layer_norm(a, self.ln1_scale, self.ln1_shift))
        f = self.moe.forward(x, renormalize=cfg.moe_renormalize)
        return T.add(x, T.layer_norm(f, self.ln2_scale, self.ln2_shift))


class _Group:
    """A run of transformer blocks at one level, with its prior adapter."""

    def __init__(self, store, name: str, level: int, count: int, cfg: ModelConfig, rng):
        self.level = level
        self.adapter = PriorAdapter(store, f"{name}.prior", level, cfg.base_channels, rng)
        self.blocks = [
            TransformerBlock(
                store, f"{name}.block{i}", cfg.width_at(level), cfg.heads_at(level), cfg, rng
            )
            for i in range(count)
        ]

    def forward(self, x: T.Tensor, bundle: PriorBundle) -> T.Tensor:
        f_pi, f_ps = self.adapter.adapt(bundle)
        if f_pi.shape != x.shape:
            raise DataError(
                f"prior features {f_pi.shape} do not match block input {x.shape} at level {self.level}"
            )
        for block in self.blocks:
            x = block.forward(x, f_pi, f_ps)
        return x


class IsaT:
    """Full model: stem, encoder, bottleneck, decoder with skips, head."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.store = T.ParamStore()
        rng = np.random.default_rng(cfg.seed)
        store = self.store
        c = cfg.base_channels

        self.stem_kernel = store.add("stem.kernel", T.conv_init(rng, c, 3, 3, 3))
        self.stem_bias = store.add("stem.bias", np.zeros(c, dtype=np.float32))

        self.enc0 = _Group(store, "enc0", 0, cfg.blocks[0], cfg, rng)
        self.down0_kernel = store.add("down0.kernel", T.conv_init(rng, 2 * c, c, 3, 3))
        self.down0_bias = store.add("down0.bias", np.zeros(2 * c, dtype=np.float32))
        self.enc1 = _Group(store, "enc1", 1, cfg.blocks[1], cfg, rng)
        self.down1_kernel = store.add("down1.kernel", T.conv_init(rng, 4 * c, 2 * c, 3, 3))
        self.down1_bias = store.add("down1.bias", np.zeros(4 * c, dtype=np.float32))
        self.bot = _Group(store, "bot", 2, cfg.blocks[2], cfg, rng)

        self.up1_kernel = store.add("up1.kernel", T.conv_init(rng, 2 * c, 4 * c, 1, 1))
        self.up1_bias = store.add("up1.bias", np.zeros(2 * c, dtype=np.float32))
        self.skip1_kernel = store.add("skip1.kernel", T.conv_init(rng, 2 * c, 4 * c, 1, 1))
        self.skip1_bias = store.add("skip1.bias", np.zeros(2 * c, dtype=np.float32))
        self.dec1 = _Group(store, "dec1", 1, cfg.blocks[1], cfg, rng)

        self.up0_kernel = store.add("up0.kernel", T.conv_init(rng, c, 2 * c, 1, 1))
        self.up0_bias = store.add("up0.bias", np.zeros(c, dtype=np.float32))
        self.skip0_kernel = store.add("skip0.kernel", T.conv_init(rng, c, 2 * c, 1, 1))
        self.skip0_bias = store.add("skip0.bias", np.zeros(c, dtype=np.float32))
        self.dec0 = _Group(store, "dec0", 0, cfg.blocks[0], cfg, rng)

        # zero-initialized head: a fresh model is the identity map
        self.head_kernel = store.add("head.kernel", np.zeros((3, c, 3, 3), dtype=np.float32))
        self.head_bias = store.add("head.bias", np.zeros(3, dtype=np.float32))

    def downsample(self, x: T.Tensor, which: int) -> T.Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DataError(f"downsample needs even extents, got {x.shape}")
        k, b = (self.down0_kernel, self.down0_bias) if which == 0 else (self.down1_kernel, self.down1_bias)
        return T.conv2d(x, k, stride=2, padding=1, bias=b)

    def upsample(self, x: T.Tensor, which: int) -> T.Tensor:
        k, b = (self.up0_kernel, self.up0_bias) if which == 0 else (self.up1_kernel, self.up1_bias)
        return T.conv2d(T.nearest_upsample(x, 2), k, bias=b)

    def skip_fuse(self, up: T.Tensor, skip: T.Tensor, which: int) -> T.Tensor:
        k, b = (self.skip0_kernel, self.skip0_bias) if which == 0 else (self.skip1_kernel, self.skip1_bias)
        return T.conv2d(T.concat_channels(up, skip), k, bias=b)

    def forward(self, images: T.Tensor, bundle: PriorBundle, training: bool = False) -> T.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise DataError(f"model expects (N,3,H,W) input, got {images.shape}")
        n, _, h, w = images.shape
        if h % 4 or w % 4:
            raise DataError(f"input extents must be divisible by 4, got {h}x{w}")
        c = self.cfg.base_channels

        x = T.conv2d(images, self.stem_kernel, padding=1, bias=self.stem_bias)
        e0 = self.enc0.forward(x, bundle)
        assert e0.shape == (n, c, h, w)
        e1 = self.enc1.forward(self.downsample(e0, 0), bundle)
        assert e1.shape == (n, 2 * c, h // 2, w // 2)
        b = self.bot.forward(self.downsample(e1, 1), bundle)
        assert b.shape == (n, 4 * c, h // 4, w // 4)
        d1 = self.dec1.forward(self.skip_fuse(self.upsample(b, 1), e1, 1), bundle)
        assert d1.shape == e1.shape
        d0 = self.dec0.forward(self.skip_fuse(self.upsample(d1, 0), e0, 0), bundle)
        assert d0.shape == e0.shape
        refinement = T.conv2d(d0, self.head_kernel, padding=1, bias=self.head_bias)
        out = T.add(images, refinement)
        if not training:
            out = T.clamp(out, 0.0, 1.0)
        return out

    def parameter_count(self) -> int:
        return self.store.count()

    def named_parameters(self):
        return self.store.named()


def describe(cfg: ModelConfig, sample_hw: int = 64) -> str:
    """Deterministic report of the shape chain and every parameter."""
    model = IsaT(cfg)
    c = cfg.base_channels
    h = w = sample_hw
    buf = io.StringIO()
    buf.write("config:\n")
    for line in cfg.to_text().strip().splitlines():
        buf.write(f"  {line}\n")
    buf.write(f"\nshape chain for {h}x{w} input:\n")
    buf.write(f"  stem    : (H, W, {c}) -> ({h}, {w}, {c})\n")
    buf.write(f"  enc0    : (H, W, {c}) -> ({h}, {w}, {c})\n")
    buf.write(f"  enc1    : (H/2, W/2, {2 * c}) -> ({h // 2}, {w // 2}, {2 * c})\n")
    buf.write(f"  bottleneck: (H/4, W/4, {4 * c}) -> ({h // 4}, {w // 4}, {4 * c})\n")
    buf.write(f"  dec1    : (H/2, W/2, {2 * c}) -> ({h // 2}, {w // 2}, {2 * c})\n")
    buf.write(f"  dec0    : (H, W, {c}) -> ({h}, {w}, {c})\n")
    buf.write(f"  output  : (H, W, 3) -> ({h}, {w}, 3)\n")
    buf.write("\nparameters:\n")
    total = 0
    for name, p in model.named_parameters():
        shape = "x".join(str(s) for s in p.shape)
        buf.write(f"  {name:<40s} {shape:>14s} {p.size:>9d}\n")
        total += p.size
    buf.write(f"\ntotal parameter count: {total}\n")
    return buf.getvalue()


CONFIG_RECORD = "config"


def save_checkpoint(path: str, model: IsaT, extras: dict | None = None) -> None:
    """All named parameters plus the embedded config text, then extras."""
    records: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        records[name] = p.data
    records[CONFIG_RECORD] = container.encode_text(model.cfg.to_text())
    for name, arr in (extras or {}).items():
        records[name] = np.asarray(arr, dtype=np.float32)
    container.write_records(path, records)


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    records = container.read_records(path)
    if CONFIG_RECORD not in records:
        raise DataError(f"{path}: checkpoint has no embedded config record")
    cfg = ModelConfig.from_text(container.decode_text(records.pop(CONFIG_RECORD)))
    return cfg, records


def build_from_checkpoint(path: str) -> tuple[IsaT, dict[str, np.ndarray]]:
    """Reconstruct the model; returns leftover (non-parameter) records."""
    cfg, records = load_checkpoint(path)
    model = IsaT(cfg)
    for name, p in model.named_parameters():
        if name not in records:
            raise DataError(f"{path}: checkpoint missing parameter {name}")
        arr = records.pop(name)
        if arr.shape != p.shape:
            raise DataError(
                f"{path}: parameter {name} has shape {arr.shape}, model expects {p.shape}"
            )
        p.data[:] = arr
    return model, records
