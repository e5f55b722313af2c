"""Compact convolutional transformer backbone with quadruple blocks.

A quadruple block carries four token streams through one shared set of
attention and MLP parameters:

* ``base``   - self-attention over base-domain tokens,
* ``t2b``    - queries from the running target->base stream, keys/values
  from the base stream of the same depth,
* ``b2t``    - the mirror image (queries from b->t, keys/values from target),
* ``target`` - self-attention over target-domain tokens.

The first block seeds ``t2b`` with raw target tokens and ``b2t`` with raw
base tokens. Every path is pre-norm: ``s += attn(norm1(s), ...)`` then
``s += mlp(norm2(s))``. The four streams are evaluated as one stacked batch,
which is exact because the self paths are cross-attention with ``q == kv``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from adapter import ndcore as nd
from adapter.errors import ShapeError
from adapter.ndcore import functional as F
from adapter.ndcore.nn import Conv2d, LayerNorm, Linear, Module, Parameter, trunc_normal
from adapter.ndcore.tensor import Tensor, as_tensor, concat
from adapter.resample import grid_interp_matrix


@dataclass
class TokenizerConfig:
    image_size: int = 16
    channels: int = 3
    embed_dim: int = 64
    conv_layers: int = 2
    kernel_size: int = 3
    conv_stride: int = 1
    conv_channels: int = 32
    pool_window: int = 3
    pool_stride: int = 2
    pool_padding: int = 1

    def layer_channels(self) -> List[int]:
        return [self.channels] + [self.conv_channels] * (self.conv_layers - 1) + [self.embed_dim]

    def grid(self, height: int = None, width: int = None) -> Tuple[int, int]:
        """Token grid produced for an input of the given size (floor-formula chain)."""
        h = self.image_size if height is None else height
        w = self.image_size if width is None else width
        pad = self.kernel_size // 2
        for _ in range(self.conv_layers):
            h = F.conv_output_size(h, self.kernel_size, self.conv_stride, pad)
            w = F.conv_output_size(w, self.kernel_size, self.conv_stride, pad)
            if min(h, w) < 1:
                break
            h = F.conv_output_size(h, self.pool_window, self.pool_stride, self.pool_padding)
            w = F.conv_output_size(w, self.pool_window, self.pool_stride, self.pool_padding)
        if min(h, w) < 1:
            raise ShapeError(f"input {height}x{width} too small for the tokenizer chain")
        return h, w

    def token_count(self, height: int = None, width: int = None) -> int:
        h, w = self.grid(height, width)
        return h * w


@dataclass
class ModelConfig:
    image_size: int = 16
    channels: int = 3
    embed_dim: int = 64
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 2.0
    conv_layers: int = 2
    kernel_size: int = 3
    conv_stride: int = 1
    conv_channels: int = 32
    pool_window: int = 3
    pool_stride: int = 2
    pool_padding: int = 1
    positional_embedding: bool = True
    gelu: str = "exact"
    replicas: int = 4
    norm_eps: float = 1e-5

    @property
    def tokenizer(self) -> TokenizerConfig:
        return TokenizerConfig(
            image_size=self.image_size, channels=self.channels, embed_dim=self.embed_dim,
            conv_layers=self.conv_layers, kernel_size=self.kernel_size, conv_stride=self.conv_stride,
            conv_channels=self.conv_channels, pool_window=self.pool_window,
            pool_stride=self.pool_stride, pool_padding=self.pool_padding,
        )

    @property
    def activation(self) -> str:
        return "gelu" if self.gelu == "exact" else "gelu_tanh"


@dataclass
class StreamQuad:
    """Four equally shaped token streams (or pooled embeddings)."""

    base: Tensor
    t2b: Tensor
    b2t: Tensor
    target: Tensor

    def as_list(self) -> List[Tensor]:
        return [self.base, self.t2b, self.b2t, self.target]

    def check(self) -> None:
        shapes = {s.shape for s in self.as_list()}
        if len(shapes) != 1:
            raise ShapeError(f"stream shapes differ: {[s.shape for s in self.as_list()]}")


class Tokenizer(Module):
    def __init__(self, cfg: TokenizerConfig, rng: np.random.Generator, positional: bool = True):
        self.cfg = cfg
        chans = cfg.layer_channels()
        self.convs = [
            Conv2d(a, b, cfg.kernel_size, rng, stride=cfg.conv_stride, padding=cfg.kernel_size // 2)
            for a, b in zip(chans[:-1], chans[1:])
        ]
        self.grid = cfg.grid()
        n = self.grid[0] * self.grid[1]
        self.pos_embed = Parameter(trunc_normal(rng, (n, cfg.embed_dim), std=0.2)) if positional else None
        self._interp_cache = {}

    def positional(self, grid) -> Tensor:
        if tuple(grid) == tuple(self.grid):
            return self.pos_embed
        key = (tuple(grid), self.pos_embed.dtype)
        if key not in self._interp_cache:
            m = grid_interp_matrix(self.grid, grid)
            self._interp_cache[key] = Tensor(m, dtype=self.pos_embed.dtype)
        return self._interp_cache[key] @ self.pos_embed

    def forward(self, images) -> Tensor:
        return tokenize(images, self)


def tokenize(images, tokenizer: Tokenizer) -> Tensor:
    """(C,H,W) -> (N,d) or (B,C,H,W) -> (B,N,d): conv -> ReLU -> max-pool per layer."""
    x = as_tensor(images)
    cfg = tokenizer.cfg
    if x.ndim not in (3, 4) or x.shape[-3] != cfg.channels:
        raise ShapeError(f"expected (B,{cfg.channels},H,W) images, got {x.shape}")
    grid = cfg.grid(x.shape[-2], x.shape[-1])
    for conv in tokenizer.convs:
        x = F.relu(conv(x))
        x = F.max_pool2d(x, cfg.pool_window, cfg.pool_stride, cfg.pool_padding)
    d = cfg.embed_dim
    if x.ndim == 3:
        tokens = x.reshape(d, -1).transpose(1, 0)
    else:
        tokens = x.reshape(x.shape[0], d, -1).transpose(0, 2, 1)
    assert tokens.shape[-2] == grid[0] * grid[1]
    if tokenizer.pos_embed is not None:
        tokens = tokens + tokenizer.positional(grid)
    return tokens


class Attention(Module):
    """Multi-head attention projections shared by all four paths."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"embedding width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng, bias=False)
        self.proj = Linear(dim, dim, rng)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    return x.swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = x.swapaxes(-3, -2)
    *lead, n, h, hd = x.shape
    return x.reshape(*lead, n, h * hd)


def _attend(q: Tensor, k: Tensor, v: Tensor, attn: Attention) -> Tensor:
    h = attn.heads
    qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    scale = 1.0 / math.sqrt(q.shape[-1] // h)
    weights = F.softmax((qh @ kh.swapaxes(-1, -2)) * scale, axis=-1)
    return attn.proj(_merge_heads(weights @ vh))


def self_attention(x: Tensor, attn: Attention) -> Tensor:
    """softmax(Q K' / sqrt(d_k)) V with Q, K, V all projected from ``x``."""
    return _attend(attn.q(x), attn.k(x), attn.v(x), attn)


def cross_attention(q_src: Tensor, kv_src: Tensor, attn: Attention) -> Tensor:
    """Queries from ``q_src``; keys and values from ``kv_src``."""
    if q_src.shape[-1] != kv_src.shape[-1]:
        raise ShapeError(f"cross-attention widths differ: {q_src.shape} vs {kv_src.shape}")
    return _attend(attn.q(q_src), attn.k(kv_src), attn.v(kv_src), attn)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng, activation: str = "gelu"):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.activation(self.fc1(x), self.activation))


class QuadrupleBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng, activation="gelu", eps=1e-5):
        self.norm1 = LayerNorm(dim, eps)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = FeedForward(dim, int(dim * mlp_ratio), rng, activation)

    def forward(self, quad: StreamQuad) -> StreamQuad:
        return quadruple_forward(quad, self)

    def forward_self(self, x: Tensor) -> Tensor:
        """Single-stream (self-attention only) path used at inference."""
        x = x + self_attention(self.norm1(x), self.attn)
        return x + self.mlp(self.norm2(x))


def quadruple_forward(quad: StreamQuad, block: QuadrupleBlock) -> StreamQuad:
    quad.check()
    unbatched = quad.base.ndim == 2
    streams = [s.reshape(1, *s.shape) if unbatched else s for s in quad.as_list()]
    b = streams[0].shape[0]
    x = concat(streams, axis=0)                       # [base | t2b | b2t | target]
    normed = block.norm1(x)
    nb, nt = normed[:b], normed[3 * b:]
    kv = concat([nb, nb, nt, nt], axis=0)
    x = x + cross_attention(normed, kv, block.attn)
    x = x + block.mlp(block.norm2(x))
    parts = [x[i * b:(i + 1) * b] for i in range(4)]
    if unbatched:
        parts = [p.reshape(p.shape[1:]) for p in parts]
    return StreamQuad(*parts)


def sequence_pool(tokens: Tensor, weight: Tensor) -> Tensor:
    """Attention pooling: softmax over tokens of ``tokens @ weight``, then weighted sum."""
    scores = tokens @ weight.reshape(-1, 1)           # (..., N, 1)
    alpha = F.softmax(scores, axis=-2)
    pooled = alpha.swapaxes(-1, -2) @ tokens          # (..., 1, d)
    return pooled.reshape(*tokens.shape[:-2], tokens.shape[-1])


class Backbone(Module):
    """Tokenizer + stacked quadruple blocks + final norm + sequence pooling."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.tokenizer, rng, cfg.positional_embedding)
        self.blocks = [
            QuadrupleBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng, cfg.activation, cfg.norm_eps)
            for _ in range(cfg.depth)
        ]
        self.norm = LayerNorm(cfg.embed_dim, cfg.norm_eps)
        self.pool = Parameter(trunc_normal(rng, (cfg.embed_dim,)))

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def encode_tokens(self, quad: StreamQuad) -> StreamQuad:
        for block in self.blocks:
            quad = block(quad)
        pooled = []
        for s in quad.as_list():
            pooled.append(sequence_pool(self.norm(s), self.pool))
        return StreamQuad(*pooled)

    def forward_pair(self, x_base, x_target) -> StreamQuad:
        return forward_pair(x_base, x_target, self)

    def forward_single(self, x_target) -> Tensor:
        return forward_single(x_target, self)

    def encode_target(self, x_target) -> Tensor:
        """Pooled self-attention embedding Z_T only."""
        x = tokenize(x_target, self.tokenizer)
        for block in self.blocks:
            x = block.forward_self(x)
        return sequence_pool(self.norm(x), self.pool)


def forward_pair(x_base, x_target, backbone: Backbone) -> StreamQuad:
    """Pooled (Z_B, Z_T->B, Z_B->T, Z_T) for paired base/target inputs."""
    tb = tokenize(x_base, backbone.tokenizer)
    tt = tokenize(x_target, backbone.tokenizer)
    if tb.shape != tt.shape:
        raise ShapeError(f"base tokens {tb.shape} and target tokens {tt.shape} differ")
    return backbone.encode_tokens(StreamQuad(tb, tt, tb, tt))


def forward_single(x_target, backbone: Backbone, replicas: int = None) -> Tensor:
    """Double-target embedding: Z_T replicated ``replicas`` times along the last axis."""
    replicas = backbone.cfg.replicas if replicas is None else replicas
    z = backbone.encode_target(x_target)
    return concat([z] * replicas, axis=-1)


def concat_quad(quad: StreamQuad) -> Tensor:
    return concat(quad.as_list(), axis=-1)


def count_forward_flops(backbone: Backbone, images: np.ndarray, encoder_only: bool = False) -> int:
    """Multiply-add flops of one ``forward_pair``; optionally only blocks + pooling."""
    with nd.no_grad():
        if encoder_only:
            tokens = tokenize(images, backbone.tokenizer)
            with nd.count_flops() as counter:
                backbone.encode_tokens(StreamQuad(tokens, tokens, tokens, tokens))
        else:
            with nd.count_flops() as counter:
                forward_pair(images, images, backbone)
    return counter.total
