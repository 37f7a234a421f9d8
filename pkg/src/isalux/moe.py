"""Sparse mixture-of-experts feed-forward network.

A gate scores all experts from the globally pooled feature map; only the
top-k experts (k=2 by default) actually execute, and their outputs are
weighted by the raw gate scores. Each expert is a small convolutional
bottleneck that preserves the feature shape.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T


class Expert:
    """conv1x1 C->E, GELU, conv3x3 E->E, GELU, conv1x1 E->C."""

    def __init__(self, store: T.ParamStore, prefix: str, channels: int, expansion: float, rng: np.random.Generator):
        e = int(round(channels * expansion))
        self.kernel1 = store.add(f"{prefix}.conv1.kernel", T.conv_init(rng, e, channels, 1, 1))
        self.bias1 = store.add(f"{prefix}.conv1.bias", np.zeros(e, dtype=np.float32))
        self.kernel2 = store.add(f"{prefix}.conv2.kernel", T.conv_init(rng, e, e, 3, 3))
        self.bias2 = store.add(f"{prefix}.conv2.bias", np.zeros(e, dtype=np.float32))
        self.kernel3 = store.add(f"{prefix}.conv3.kernel", T.conv_init(rng, channels, e, 1, 1))
        self.bias3 = store.add(f"{prefix}.conv3.bias", np.zeros(channels, dtype=np.float32))

    def forward(self, x: T.Tensor) -> T.Tensor:
        h = T.gelu(T.conv2d(x, self.kernel1, bias=self.bias1))
        h = T.gelu(T.conv2d(h, self.kernel2, padding=1, bias=self.bias2))
        return T.conv2d(h, self.kernel3, bias=self.bias3)


class Gate:
    """Softmax scores over experts from the pooled feature vector."""

    def __init__(self, store: T.ParamStore, prefix: str, channels: int, num_experts: int, k: int, rng: np.random.Generator):
        if k > num_experts:
            raise T.ShapeError(f"top-k {k} exceeds expert count {num_experts}")
        self.num_experts = num_experts
        self.k = k
        self.weight = store.add(
            f"{prefix}.gate", (rng.standard_normal((channels, num_experts)) * 0.02).astype(np.float32)
        )


def gate_scores(x: T.Tensor, gate: Gate) -> T.Tensor:
    """(N,C,H,W) -> (N, num_experts); rows are softmax distributions."""
    pooled = T.global_avg_pool(x)
    return T.softmax(T.matmul(pooled, gate.weight), axis=-1)


def top_k(scores: np.ndarray, k: int = 2) -> list[tuple[int, float]]:
    """Indices and values of the k largest scores; ties go to lower index."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise T.ShapeError(f"top_k expects a score vector, got shape {scores.shape}")
    if k > scores.shape[0]:
        raise T.ShapeError(f"top-k {k} exceeds score count {scores.shape[0]}")
    order = np.argsort(-scores, kind="stable")
    return [(int(i), float(scores[i])) for i in order[:k]]


class MoeFfn:
    """Gate plus experts with lazy top-k dispatch.

    `expert_evals` counts individual expert executions (per sample), which
    makes the sparsity contract directly observable.
    """

    def __init__(
        self,
        store: T.ParamStore,
        prefix: str,
        channels: int,
        num_experts: int,
        k: int,
        expansion: float,
        rng: np.random.Generator,
    ):
        self.gate = Gate(store, prefix, channels, num_experts, k, rng)
        self.experts = [
            Expert(store, f"{prefix}.expert{i}", channels, expansion, rng)
            for i in range(num_experts)
        ]
        self.expert_evals = 0

    def forward(self, x: T.Tensor, renormalize: bool = False) -> T.Tensor:
        scores = gate_scores(x, self.gate)
        batch = x.shape[0]
        outs = []
        for b in range(batch):
            xs = T.batch_slice(x, b, b + 1)
            row = T.batch_slice(scores, b, b + 1)
            # fixed ascending-index order for the weighted sum (determinism)
            chosen = sorted(top_k(scores.data[b], self.gate.k))
            picked = [T.channel_slice(row, i, i + 1) for i, _ in chosen]
            if renormalize:
                denom = picked[0]
                for p in picked[1:]:
                    denom = T.add(denom, p)
                picked = [T.div(p, denom) for p in picked]
            acc = None
            for (idx, _), weight in zip(chosen, picked):
                self.expert_evals += 1
                term = T.mul(weight, self.experts[idx].forward(xs))
                acc = term if acc is None else T.add(acc, term)
            outs.append(acc)
        return outs[0] if batch == 1 else T.concat_batch(outs)
