"""Spatial alignment via matching.

A block maps an audio feature set of any resolution (A x C) onto the visual
feature grid (V x C):

1. similarity: ``T[k, l] = max_j <p^k(l), W a(j)>`` over K learnable spatial
   embeddings ``p^k`` (each V x C) and a shared projection ``W``;
2. pooling: per location, softmax over k mixes the K embeddings;
3. refinement: multi-head attention with the pooled embedding as queries and
   the audio features as keys/values, added back residually.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod, sqrt

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .features import FeatureMap
from .nn import Module, param
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class SamConfig:
    layer_index: int
    audio_resolution: tuple[int, ...]
    visual_resolution: tuple[int, ...]
    channels: int
    num_embeddings: int
    num_heads: int = 4
    temperature: float = 1.0
    # False gives K x 1 x C embeddings shared by every location
    spatial: bool = True

    def __post_init__(self):
        if self.audio_positions < 1 or self.visual_positions < 1:
            raise ConfigError(f"resolutions must be non-empty: A={self.audio_resolution}, V={self.visual_resolution}")
        if self.channels < 1 or self.num_embeddings < 1 or self.num_heads < 1:
            raise ConfigError("channels, num_embeddings and num_heads must be positive")
        if self.channels % self.num_heads:
            raise ConfigError(f"channels {self.channels} not divisible by num_heads {self.num_heads}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def audio_positions(self) -> int:
        return prod(self.audio_resolution)

    @property
    def visual_positions(self) -> int:
        return prod(self.visual_resolution)


class SpatialEmbeddingBank(Module):
    """K embeddings shaped like the visual feature map plus the projection W."""

    def __init__(self, num_embeddings: int, positions: int, channels: int, rng: np.random.Generator):
        self.embeddings = param(rng.normal(0.0, INIT_STD, (num_embeddings, positions, channels)))
        self.projection = param(rng.normal(0.0, INIT_STD, (channels, channels)))

    @property
    def num_embeddings(self) -> int:
        return self.embeddings.shape[0]


class MultiHeadAttention(Module):
    """Bias-free multi-head scaled dot-product attention."""

    def __init__(self, channels: int, num_heads: int, rng: np.random.Generator, zero_output: bool = True):
        if channels % num_heads:
            raise ConfigError(f"channels {channels} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.wq = param(rng.normal(0.0, INIT_STD, (channels, channels)))
        self.wk = param(rng.normal(0.0, INIT_STD, (channels, channels)))
        self.wv = param(rng.normal(0.0, INIT_STD, (channels, channels)))
        wo = np.zeros((channels, channels)) if zero_output else rng.normal(0.0, INIT_STD, (channels, channels))
        self.wo = param(wo)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        squeeze = query.ndim == 2
        if squeeze:
            query, key, value = (T.reshape(x, (1,) + x.shape) for x in (query, key, value))
        b, nq, c = query.shape
        nk = key.shape[1]
        h = self.num_heads
        d = c // h

        def heads(x: Tensor, n: int) -> Tensor:
            return T.transpose(T.reshape(x, (b, n, h, d)), (0, 2, 1, 3))

        q = heads(T.matmul(query, self.wq.T), nq)
        k = heads(T.matmul(key, self.wk.T), nk)
        v = heads(T.matmul(value, self.wv.T), nk)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / sqrt(d))
        attn = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, nq, c))
        out = T.matmul(ctx, self.wo.T)
        return T.reshape(out, (nq, c)) if squeeze else out


def _values(a) -> Tensor:
    return a.values if isinstance(a, FeatureMap) else a


def similarity_matrix(bank: SpatialEmbeddingBank, a) -> Tensor:
    """(..., A, C) audio features -> (..., K, V) max-over-audio similarities."""
    a = _values(a)
    k, v, c = bank.embeddings.shape
    if a.shape[-1] != c:
        raise DimensionError(f"audio channels {a.shape[-1]} != embedding channels {c}")
    proj = T.matmul(a, bank.projection.T)  # rows are W a(j)
    flat = T.reshape(bank.embeddings, (k * v, c))
    scores = T.matmul(proj, flat.T)  # (..., A, K*V)
    best, _ = T.max_reduce(scores, axis=-2)
    return T.reshape(best, best.shape[:-1] + (k, v))


def mixing_weights(sim: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the K axis of a (..., K, V) similarity matrix."""
    if temperature != 1.0:
        sim = sim * (1.0 / temperature)
    return T.softmax(sim, axis=-2)


def pool_embeddings(bank: SpatialEmbeddingBank, sim: Tensor, temperature: float = 1.0,
                    positions: int | None = None) -> Tensor:
    """Per-location softmax-weighted sum of the K embeddings -> (..., V, C)."""
    k, v, c = bank.embeddings.shape
    if sim.shape[-2:] != (k, v):
        raise DimensionError(f"similarity shape {sim.shape} does not match bank ({k}, {v})")
    w = mixing_weights(sim, temperature)
    lead = w.shape[:-2]
    # per location l: (batch, K) @ (K, C), batched over l
    wl = T.transpose(T.reshape(w, (-1, k, v)), (2, 0, 1))
    mixed = T.matmul(wl, T.transpose(bank.embeddings, (1, 0, 2)))
    mixed = T.reshape(T.transpose(mixed, (1, 0, 2)), lead + (v, c))
    if positions is not None and positions != v:
        if v != 1:
            raise DimensionError(f"cannot broadcast {v} embedding positions to {positions}")
        mixed = mixed * np.ones((positions, 1))
    return mixed


def refine(pooled: Tensor, a, attention: MultiHeadAttention) -> Tensor:
    """Attention over audio keys/values plus the residual pooled embedding."""
    a = _values(a)
    if a.shape[-1] != pooled.shape[-1]:
        raise DimensionError(f"audio channels {a.shape[-1]} != pooled channels {pooled.shape[-1]}")
    return attention(pooled, a, a) + pooled


class SamBlock(Module):
    def __init__(self, config: SamConfig, rng: np.random.Generator):
        self.config = config
        positions = config.visual_positions if config.spatial else 1
        self.bank = SpatialEmbeddingBank(config.num_embeddings, positions, config.channels, rng)
        self.attention = MultiHeadAttention(config.channels, config.num_heads, rng)

    def __call__(self, a: FeatureMap) -> FeatureMap:
        return sam_forward(self, a)


def sam_forward(block: SamBlock, a: FeatureMap) -> FeatureMap:
    cfg = block.config
    vals = _values(a)
    if vals.shape[-2] != cfg.audio_positions or vals.shape[-1] != cfg.channels:
        raise DimensionError(
            f"SAM_{cfg.layer_index} expects (..., {cfg.audio_positions}, {cfg.channels}), got {vals.shape}"
        )
    sim = similarity_matrix(block.bank, vals)
    pooled = pool_embeddings(block.bank, sim, cfg.temperature, cfg.visual_positions)
    return FeatureMap(refine(pooled, vals, block.attention), tuple(cfg.visual_resolution))


def oracle_substitute(block: SamBlock, v: FeatureMap) -> FeatureMap:
    """Pass real visual features through in place of the aligned output."""
    cfg = block.config
    vals = _values(v)
    if vals.shape[-2:] != (cfg.visual_positions, cfg.channels):
        raise DimensionError(
            f"oracle features must be (..., {cfg.visual_positions}, {cfg.channels}), got {vals.shape}"
        )
    return FeatureMap(vals, tuple(cfg.visual_resolution))


def k_schedule(num_blocks: int, k_last: int) -> list[int]:
    """K per block, shrinking by 4x per step away from the last block."""
    if num_blocks < 1 or k_last < 1:
        raise ConfigError("num_blocks and k_last must be >= 1")
    return [max(1, k_last // 4 ** (num_blocks - 1 - i)) for i in range(num_blocks)]
