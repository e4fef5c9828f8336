"""Per-block router units: score heads, threshold discriminator, and the
Gumbel-Sigmoid relaxation used for end-to-end training.

At inference a router squashes its raw score through a plain sigmoid and
thresholds it; no noise is drawn, so decisions are deterministic. During
training the score is perturbed by the difference of two Gumbel draws and
flattened by the temperature, giving a soft mask in (0,1) whose gradient
trains the router; the hard mask thresholds that soft value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import Linear, ParamStore
from .tensor import DimensionError, Tensor


@dataclass
class GumbelParams:
    temperature: float = 5.0
    threshold: float = 0.5        # inference threshold on sigmoid(score)
    train_threshold: float = 0.5  # applied to the noisy soft mask

    def validate(self) -> None:
        assert self.temperature > 0
        assert 0.0 < self.threshold < 1.0
        assert 0.0 < self.train_threshold < 1.0


@dataclass
class RouterDecision:
    """Routing state for one block at one step: raw score, squashed score,
    soft mask (training only) and hard mask, each per sample."""

    k: np.ndarray
    k_prime: np.ndarray
    hard: np.ndarray
    soft: Optional[Tensor] = None


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_sigmoid(k: Tensor, temperature: float, g1: np.ndarray, g2: np.ndarray) -> Tensor:
    """sigmoid((k + g1 - g2) / temperature); differentiable in the score k."""
    return ((k + Tensor(np.asarray(g1 - g2, dtype=k.dtype))) / temperature).sigmoid()


def threshold_mask(k_prime: np.ndarray, threshold: float) -> np.ndarray:
    """Hard mask: 1 where the squashed score strictly exceeds the threshold."""
    return (np.asarray(k_prime) > threshold).astype(np.float32)


class RouterUNet:
    """Spatial-feature router: global average pool, then a two-layer MLP
    (C -> C/8 -> 1, SiLU between) ending in a scalar score. The hidden
    width keeps the router under 1% of its block's parameter count."""

    def __init__(self, ps: ParamStore, name: str, channels: int,
                 rng: np.random.Generator, dtype=np.float32):
        hidden = max(2, channels // 8)
        self.channels = channels
        self.hidden = hidden
        self.fc1 = Linear(ps, f"{name}.fc1", channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(ps, f"{name}.fc2", hidden, 1, rng, init="small", dtype=dtype)
        # start active: score ~ +1 puts the squashed score at ~0.73 > 0.5
        self.fc2.b.data = np.full_like(self.fc2.b.data, 1.0)

    def score(self, h: Tensor) -> Tensor:
        if h.ndim != 4 or h.shape[1] != self.channels:
            raise DimensionError(f"router expects (B,{self.channels},H,W), got {h.shape}")
        pooled = h.mean(dims=(2, 3))
        return self.fc2(self.fc1(pooled).silu()).reshape(h.shape[0])


class RouterDiT:
    """Token-feature router: a token-mean path (C -> O) and a channel-mean
    path (N -> O) mixed 50/50, then a scalar head."""

    def __init__(self, ps: ParamStore, name: str, tokens: int, channels: int,
                 rng: np.random.Generator, alpha1: float = 0.5, alpha2: float = 0.5,
                 dtype=np.float32):
        self.tokens = tokens
        self.channels = channels
        self.out_dim = max(1, channels // 64)
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.mlp_global = Linear(ps, f"{name}.global", channels, self.out_dim, rng, dtype=dtype)
        self.mlp_local = Linear(ps, f"{name}.local", tokens, self.out_dim, rng, dtype=dtype)
        self.head = Linear(ps, f"{name}.head", self.out_dim, 1, rng, init="small", dtype=dtype)
        self.head.b.data = np.full_like(self.head.b.data, 1.0)

    def score(self, h: Tensor) -> Tensor:
        if h.ndim != 3 or h.shape[1] != self.tokens or h.shape[2] != self.channels:
            raise DimensionError(f"router expects (B,{self.tokens},{self.channels}), got {h.shape}")
        g = self.mlp_global(h.mean(dims=1))
        l = self.mlp_local(h.mean(dims=2))
        mix = g.scale(self.alpha1) + l.scale(self.alpha2)
        return self.head(mix).reshape(h.shape[0])


def decide(router, h: Tensor, phase: str, params: GumbelParams,
           rng: Optional[np.random.Generator] = None,
           noise: Optional[tuple] = None) -> RouterDecision:
    """Run one router on a batch of latents.

    infer: hard = 1[sigmoid(k) > threshold], no noise, soft unset.
    train: soft = gumbel_sigmoid(k) with fresh noise per sample,
           hard = 1[soft > tau]; both returned.
    """
    k = router.score(h)
    k_np = k.numpy()
    k_prime = 1.0 / (1.0 + np.exp(-k_np.astype(np.float64)))
    if phase == "infer":
        return RouterDecision(k=k_np, k_prime=k_prime,
                              hard=threshold_mask(k_prime, params.threshold))
    if phase != "train":
        raise ValueError(f"unknown phase {phase!r}")
    if noise is None:
        g1 = gumbel_noise(rng, k_np.shape)
        g2 = gumbel_noise(rng, k_np.shape)
    else:
        g1, g2 = noise
    soft = gumbel_sigmoid(k, params.temperature, g1, g2)
    hard = threshold_mask(soft.numpy(), params.train_threshold)
    return RouterDecision(k=k_np, k_prime=k_prime, hard=hard, soft=soft)
