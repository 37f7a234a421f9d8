"""Hybrid illumination- and semantics-aware multi-headed self-attention.

Two independent attention branches run in parallel; one result map is
enriched elementwise by the adapted illumination features, the other by the
adapted semantic features, and the two are combined with learnable scalar
weights before a 1x1 projection back into the residual stream.

Attention is computed over channel-channel similarity: per head, scores form
a (C/h, C/h) matrix, so cost is independent of image area. Q, K, V come from
a single 3x3 projection and each carries an additive low-rank correction
computed from the block input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

TEMPERATURE_FLOOR = 1e-4


def tokens_from_map(x: T.Tensor) -> T.Tensor:
    """(N,C,H,W) -> (N, H*W, C)."""
    n, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def map_from_tokens(x: T.Tensor, h: int, w: int) -> T.Tensor:
    """(N, H*W, C) -> (N,C,H,W)."""
    n, hw, c = x.shape
    return T.transpose(T.reshape(x, (n, h, w, c)), (0, 3, 1, 2))


class LoraAdapter:
    """Low-rank corrections for Q, K, V.

    alpha_* are (C, C/r), beta_* are (C/r, C); beta starts at zero so the
    adapted projections initially equal the raw ones.
    """

    def __init__(
        self,
        store: T.ParamStore,
        prefix: str,
        channels: int,
        rank: int,
        rng: np.random.Generator,
        alpha_std: float = 0.02,
    ):
        if rank < 1 or channels % rank != 0:
            raise T.ShapeError(f"LoRA rank {rank} must divide channel count {channels}")
        self.channels = channels
        self.rank = rank
        inner = channels // rank
        self.alpha = {}
        self.beta = {}
        for key in ("q", "k", "v"):
            self.alpha[key] = store.add(
                f"{prefix}.alpha_{key}",
                (rng.standard_normal((channels, inner)) * alpha_std).astype(np.float32),
            )
            self.beta[key] = store.add(
                f"{prefix}.beta_{key}", np.zeros((inner, channels), dtype=np.float32)
            )

    def delta(self, f_tokens: T.Tensor, key: str) -> T.Tensor:
        return T.matmul(T.matmul(f_tokens, self.alpha[key]), self.beta[key])


def apply_lora(
    f_tokens: T.Tensor, q: T.Tensor, k: T.Tensor, v: T.Tensor, adapter: LoraAdapter
) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """Add the low-rank corrections derived from the block input to Q/K/V."""
    if f_tokens.shape[-1] != adapter.channels:
        raise T.ShapeError(
            f"LoRA adapter built for {adapter.channels} channels, input has {f_tokens.shape[-1]}"
        )
    return (
        T.add(q, adapter.delta(f_tokens, "q")),
        T.add(k, adapter.delta(f_tokens, "k")),
        T.add(v, adapter.delta(f_tokens, "v")),
    )


def project_qkv(
    f_map: T.Tensor, kernel: T.Tensor, bias: T.Tensor
) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """3x3 conv C -> 3C, split into channel thirds (Q, K, V), tokenized."""
    n, c, h, w = f_map.shape
    proj = T.conv2d(f_map, kernel, stride=1, padding=1, bias=bias)
    q = tokens_from_map(T.channel_slice(proj, 0, c))
    k = tokens_from_map(T.channel_slice(proj, c, 2 * c))
    v = tokens_from_map(T.channel_slice(proj, 2 * c, 3 * c))
    return q, k, v


def split_heads(x: T.Tensor, heads: int) -> list[T.Tensor]:
    """Contiguous channel blocks; head i sees channels [i*C/h, (i+1)*C/h)."""
    c = x.shape[-1]
    if heads < 1 or c % heads != 0:
        raise T.ShapeError(f"head count {heads} must divide channel count {c}")
    step = c // heads
    return [T.channel_slice(x, i * step, (i + 1) * step) for i in range(heads)]


def merge_heads(parts: list[T.Tensor]) -> T.Tensor:
    return T.concat_last(parts)


def attend(qh: T.Tensor, kh: T.Tensor, vh: T.Tensor, temp: T.Tensor) -> T.Tensor:
    """Channel-transposed attention for one head.

    scores = Q^T K / T over the spatial axis; rows of softmax(scores) sum to
    one; output is V routed through the transposed attention matrix, so a
    common permutation of the spatial axis permutes the output identically.
    """
    tc = T.clamp_min_abs(temp, TEMPERATURE_FLOOR)
    qt = T.transpose(qh, tuple(range(qh.ndim - 2)) + (qh.ndim - 1, qh.ndim - 2))
    scores = T.div(T.matmul(qt, kh), tc)
    attn = T.softmax(scores, axis=-1)
    at = T.transpose(attn, tuple(range(attn.ndim - 2)) + (attn.ndim - 1, attn.ndim - 2))
    return T.matmul(vh, at)


@dataclass
class FusionWeights:
    upsilon: T.Tensor
    omega: T.Tensor


def fuse(
    m_i: T.Tensor,
    m_s: T.Tensor,
    f_pi: T.Tensor,
    f_ps: T.Tensor,
    weights: FusionWeights,
    use_illum: bool = True,
    use_seg: bool = True,
) -> T.Tensor:
    """upsilon * (M_i x F_pi) + omega * (M_s x F_ps), elementwise.

    Disabling a branch drops its term, which equals zeroing its weight.
    """
    for name, t in (("m_s", m_s), ("f_pi", f_pi), ("f_ps", f_ps)):
        if t.shape != m_i.shape:
            raise T.ShapeError(f"fuse operand {name} has shape {t.shape}, expected {m_i.shape}")
    terms = []
    if use_illum:
        terms.append(T.mul(weights.upsilon, T.mul(m_i, f_pi)))
    if use_seg:
        terms.append(T.mul(weights.omega, T.mul(m_s, f_ps)))
    if not terms:
        return T.Tensor(np.zeros(m_i.shape, dtype=np.float32))
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


class AttentionBranch:
    """One attention path: private projection, LoRA adapter, temperatures."""

    def __init__(
        self,
        store: T.ParamStore,
        prefix: str,
        channels: int,
        heads: int,
        rank: int,
        rng: np.random.Generator,
        lora_alpha_std: float = 0.02,
    ):
        if channels % heads != 0:
            raise T.ShapeError(f"head count {heads} must divide channels {channels}")
        self.channels = channels
        self.heads = heads
        self.qkv_kernel = store.add(
            f"{prefix}.qkv.kernel", T.conv_init(rng, 3 * channels, channels, 3, 3)
        )
        self.qkv_bias = store.add(f"{prefix}.qkv.bias", np.zeros(3 * channels, dtype=np.float32))
        self.lora = LoraAdapter(store, f"{prefix}.lora", channels, rank, rng, lora_alpha_std)
        head_dim = channels // heads
        self.temp = store.add(
            f"{prefix}.temp", np.full(heads, math.sqrt(head_dim), dtype=np.float32)
        )

    def forward(self, f_map: T.Tensor, f_tokens: T.Tensor, use_lora: bool = True) -> T.Tensor:
        q, k, v = project_qkv(f_map, self.qkv_kernel, self.qkv_bias)
        if use_lora:
            q, k, v = apply_lora(f_tokens, q, k, v, self.lora)
        outs = []
        qs, ks, vs = (split_heads(t, self.heads) for t in (q, k, v))
        for i in range(self.heads):
            temp_i = T.channel_slice(self.temp, i, i + 1)
            outs.append(attend(qs[i], ks[i], vs[i], temp_i))
        merged = merge_heads(outs)
        n, c, h, w = f_map.shape
        return map_from_tokens(merged, h, w)


class HisaMsa:
    """The full hybrid attention block for one transformer block."""

    def __init__(
        self,
        store: T.ParamStore,
        prefix: str,
        channels: int,
        heads: int,
        rank: int,
        rng: np.random.Generator,
        fusion_init: tuple[float, float] = (1.0, 0.1),
        lora_alpha_std: float = 0.02,
    ):
        self.channels = channels
        self.illum_branch = AttentionBranch(
            store, f"{prefix}.illum", channels, heads, rank, rng, lora_alpha_std
        )
        self.sem_branch = AttentionBranch(
            store, f"{prefix}.sem", channels, heads, rank, rng, lora_alpha_std
        )
        self.weights = FusionWeights(
            upsilon=store.add(f"{prefix}.upsilon", np.array([fusion_init[0]], dtype=np.float32)),
            omega=store.add(f"{prefix}.omega", np.array([fusion_init[1]], dtype=np.float32)),
        )
        self.out_kernel = store.add(f"{prefix}.out.kernel", T.conv_init(rng, channels, channels, 1, 1))
        self.out_bias = store.add(f"{prefix}.out.bias", np.zeros(channels, dtype=np.float32))

    def forward(
        self,
        f_map: T.Tensor,
        f_pi: T.Tensor,
        f_ps: T.Tensor,
        use_lora: bool = True,
        use_illum: bool = True,
        use_seg: bool = True,
    ) -> T.Tensor:
        f_tokens = tokens_from_map(f_map)
        m_i = self.illum_branch.forward(f_map, f_tokens, use_lora=use_lora)
        m_s = self.sem_branch.forward(f_map, f_tokens, use_lora=use_lora)
        fused = fuse(m_i, m_s, f_pi, f_ps, self.weights, use_illum=use_illum, use_seg=use_seg)
        return T.conv2d(fused, self.out_kernel, bias=self.out_bias)
