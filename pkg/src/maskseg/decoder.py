"""Query decoder: N learnable queries refined by masked cross-attention over
the low-resolution context features, self-attention and an FFN.

Each block is pre-norm with residuals::

    Q' = Q + MCA(LN(Q) + qpos, feat + pos, feat, mask)
    Q'' = Q' + SA(LN(Q'))
    Q_next = Q'' + FFN(LN(Q''))

The attention mask of a block is the binarized mask prediction made from the
previous block's queries (the first block uses the initial queries).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .config import ModelConfig
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor


@dataclass
class QuerySet:
    embeddings: Tensor  # (B, N, D)
    stage_index: int = 0


@dataclass
class AttentionMask:
    allowed: np.ndarray      # bool (B, N, S); empty rows already opened up
    empty_rows: np.ndarray   # bool (B, N): rows that had no allowed position


def sine_position_encoding(dim: int, h: int, w: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding, (h*w, dim); first half encodes y, second x."""
    def axis_code(coord, n):
        i = np.arange(n)
        ang = coord[:, None] / temperature ** (2 * (i // 2) / max(n, 1))
        return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))

    half = dim // 2
    ey = axis_code((np.arange(h) + 0.5) / h * 2 * np.pi, half)
    ex = axis_code((np.arange(w) + 0.5) / w * 2 * np.pi, dim - half)
    return np.concatenate([np.repeat(ey, w, axis=0), np.tile(ex, (h, 1))], axis=1)


class MultiHeadAttention(Module):
    """Attention from D-dim queries onto ``kdim``-dim keys/values."""

    def __init__(self, rng, dim: int, num_heads: int, kdim: int | None = None):
        kdim = dim if kdim is None else kdim
        self.q_proj = Linear(rng, dim, dim)
        self.k_proj = Linear(rng, kdim, dim)
        self.v_proj = Linear(rng, kdim, dim)
        self.out_proj = Linear(rng, dim, dim)
        self.num_heads = num_heads

    def _split(self, x, B, L):
        h = self.num_heads
        return ops.transpose(ops.reshape(x, (B, L, h, x.shape[-1] // h)), (0, 2, 1, 3))

    def forward(self, query, key, value, allowed: np.ndarray | None = None):
        """query (B, N, D); key/value (B, S, kdim); allowed bool (B, N, S)."""
        B, N, D = query.shape
        S = key.shape[1]
        q = self._split(self.q_proj(query), B, N)
        k = self._split(self.k_proj(key), B, S)
        v = self._split(self.v_proj(value), B, S)
        dh = D // self.num_heads
        logits = ops.mul(ops.matmul(q, ops.swap_last(k)), 1.0 / np.sqrt(dh))
        mask = None if allowed is None else allowed[:, None, :, :]
        attn = ops.softmax(logits, axis=-1, mask=mask)
        out = ops.matmul(attn, v)                                     # (B, h, N, dh)
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, N, D))
        return self.out_proj(out)


class FeedForward(Module):
    def __init__(self, rng, dim: int, expansion: int):
        self.fc1 = Linear(rng, dim, dim * expansion)
        self.fc2 = Linear(rng, dim * expansion, dim)

    def forward(self, x):
        return self.fc2(ops.relu(self.fc1(x)))


class DecoderBlock(Module):
    def __init__(self, rng, config: ModelConfig):
        D = config.hidden_dim
        self.cross_norm = LayerNorm(D)
        self.cross_attn = MultiHeadAttention(rng, D, config.num_heads, kdim=config.cp_proj_dim)
        self.self_norm = LayerNorm(D)
        self.self_attn = MultiHeadAttention(rng, D, config.num_heads)
        self.ffn_norm = LayerNorm(D)
        self.ffn = FeedForward(rng, D, config.ffn_expansion)


def flatten_feature(feature) -> tuple[Tensor, np.ndarray]:
    """(B, P, h, w) -> tokens (B, h*w, P) and the matching positional encoding."""
    B, P, h, w = feature.shape
    tokens = ops.transpose(ops.reshape(feature, (B, P, h * w)), (0, 2, 1))
    return tokens, sine_position_encoding(P, h, w)


def masked_cross_attention(q: QuerySet, feature, mask: AttentionMask, block: DecoderBlock,
                           query_pos) -> QuerySet:
    x = q.embeddings
    tokens, pos = flatten_feature(feature)
    if mask.allowed.shape[-1] != tokens.shape[1]:
        raise ValueError(f"mask covers {mask.allowed.shape[-1]} positions, "
                         f"feature has {tokens.shape[1]}")
    qin = ops.add(block.cross_norm(x), query_pos)
    attended = block.cross_attn(qin, ops.add(tokens, pos), tokens, mask.allowed)
    return QuerySet(ops.add(x, attended), q.stage_index)


def self_attention(q: QuerySet, block: DecoderBlock) -> QuerySet:
    x = q.embeddings
    h = block.self_norm(x)
    return QuerySet(ops.add(x, block.self_attn(h, h, h)), q.stage_index)


def ffn(q: QuerySet, block: DecoderBlock) -> QuerySet:
    x = q.embeddings
    return QuerySet(ops.add(x, block.ffn(block.ffn_norm(x))), q.stage_index)


def binarize_mask(mask_logits: np.ndarray, size: tuple, mode: str = "nearest",
                  threshold: float = 0.5) -> AttentionMask:
    """Turn (B, N, h', w') logits into an attention mask at ``size``.

    A position is allowed when sigmoid(logit) >= threshold.  Rows with no
    allowed position attend everywhere instead.
    """
    cut = np.log(threshold / (1.0 - threshold))
    h, w = size
    if mode == "nearest":
        binary = (mask_logits >= cut).astype(float)
        resized = ops.resize(binary, h, w, "nearest").data > 0.5
    else:
        resized = ops.resize(mask_logits, h, w, "bilinear").data >= cut
    B, N = resized.shape[:2]
    allowed = resized.reshape(B, N, h * w)
    empty = ~allowed.any(axis=-1)
    allowed = allowed | empty[..., None]
    return AttentionMask(allowed, empty)


def predict_intermediate_mask(q: QuerySet, mask_predictor: Callable, size: tuple,
                              mode: str = "nearest", threshold: float = 0.5):
    """Returns (mask logits at the mask-feature resolution, AttentionMask at ``size``)."""
    logits = mask_predictor(q.embeddings)
    return logits, binarize_mask(logits.data, size, mode, threshold)


def feature_schedule(config: ModelConfig) -> list[int]:
    """Index (0: cp1, 1: cp2, 2: cp3) of the feature each block attends to."""
    rotation = [0, 1, 2] if config.use_f3_in_decoder else [0, 1]
    return [rotation[b % len(rotation)] for b in range(config.num_blocks)]


class QueryDecoder(Module):
    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        N, D = config.num_queries, config.hidden_dim
        self.query_feat = param(rng.normal(0.0, config.query_init_std, (N, D)))
        self.query_pos = param(rng.normal(0.0, config.query_init_std, (N, D)))
        self.blocks = [DecoderBlock(rng, config) for _ in range(config.num_blocks)]
        self.config = config

    def initial_queries(self, batch: int) -> QuerySet:
        # broadcast add keeps q0 a single shared parameter
        zeros = np.zeros((batch,) + self.query_feat.shape)
        return QuerySet(ops.add(zeros, self.query_feat), 0)

    def forward(self, features, mask_predictor: Callable, q0: QuerySet | None = None):
        return run_decoder(q0 or self.initial_queries(features.f_sp.shape[0]),
                           features, self.config, self, mask_predictor)


def run_decoder(q0: QuerySet, features, config: ModelConfig, decoder: QueryDecoder,
                mask_predictor: Callable):
    """Run all blocks; returns (final QuerySet, [(QuerySet, mask logits)] per block)."""
    feats = (features.f_cp1, features.f_cp2, features.f_cp3)
    schedule = feature_schedule(config)
    q = q0
    logits = mask_predictor(q.embeddings)
    aux = []
    for b, block in enumerate(decoder.blocks):
        feat = feats[schedule[b]]
        mask = binarize_mask(logits.data, feat.shape[-2:], config.mask_resize_mode,
                             config.mask_threshold)
        q = QuerySet(q.embeddings, b // config.blocks_per_stage + 1)
        q = masked_cross_attention(q, feat, mask, block, decoder.query_pos)
        q = self_attention(q, block)
        q = ffn(q, block)
        logits = mask_predictor(q.embeddings)
        aux.append((q, logits))
    return q, aux
