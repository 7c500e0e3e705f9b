"""Spatial attention, grouped-query attention and multi-head attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerParams, RngState, conv2d, he_uniform
from .tensor import ShapeError, Tensor, as_tensor


@dataclass(frozen=True)
class AttentionConfig:
    dim: int = 128
    num_heads: int = 4
    num_kv_groups: int = 2

    def __post_init__(self):
        if self.dim < 1 or self.num_heads < 1 or self.num_kv_groups < 1:
            raise ValueError("attention sizes must be positive")
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")
        if self.num_heads % self.num_kv_groups:
            raise ValueError(f"num_heads {self.num_heads} not divisible by num_kv_groups {self.num_kv_groups}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def group_of(self, head: int) -> int:
        return head * self.num_kv_groups // self.num_heads


# ---------------------------------------------------------------- spatial


def init_spatial_attention(name: str, rng: RngState, kernel_size: int = 7) -> LayerParams:
    p = LayerParams(name)
    p.add("kernel", he_uniform(rng, (kernel_size, kernel_size, 2, 1), kernel_size * kernel_size * 2))
    p.add("bias", np.zeros(1, dtype=T.default_dtype()))
    return p


def spatial_attention(x, params: LayerParams) -> tuple[Tensor, Tensor]:
    """Gate each pixel by sigmoid(conv([mean_c(x), max_c(x)])).

    Returns ``(x * gate, gate)``; gate has shape [N, H, W, 1].
    """
    x = as_tensor(x)
    kernel = params["kernel"]
    if kernel.shape[0] % 2 == 0:
        raise ValueError("spatial attention kernel size must be odd")
    pooled = T.concat([T.mean(x, axis=-1, keepdims=True), T.amax(x, axis=-1, keepdims=True)], axis=-1)
    gate = T.sigmoid(conv2d(pooled, kernel, padding="same", bias=params.tensors.get("bias")))
    return x * gate, gate


# ---------------------------------------------------------------- token attention


def init_attention(name: str, cfg: AttentionConfig, rng: RngState) -> LayerParams:
    d, kv = cfg.dim, cfg.num_kv_groups * cfg.head_dim
    dt = T.default_dtype()
    p = LayerParams(name)
    p.add("wq", he_uniform(rng, (d, d), d))
    p.add("bq", np.zeros(d, dtype=dt))
    p.add("wk", he_uniform(rng, (d, kv), d))
    p.add("bk", np.zeros(kv, dtype=dt))
    p.add("wv", he_uniform(rng, (d, kv), d))
    p.add("bv", np.zeros(kv, dtype=dt))
    p.add("wo", he_uniform(rng, (d, d), d))
    p.add("bo", np.zeros(d, dtype=dt))
    return p


def _split_heads(t: Tensor, n: int, tokens: int, heads: int, hd: int) -> Tensor:
    # [N*T, heads*hd] -> [N, heads, T, hd]
    return T.transpose(T.reshape(t, (n, tokens, heads, hd)), (0, 2, 1, 3))


def grouped_query_attention(x, params: LayerParams, cfg: AttentionConfig) -> tuple[Tensor, Tensor]:
    """Attention where ``num_heads`` query heads share ``num_kv_groups`` K/V heads.

    Query head ``h`` reads K/V group ``h * G // H`` (contiguous blocks).
    Returns ``(output [N,T,d], weights [N,H,T,T])``.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != cfg.dim:
        raise ShapeError(f"attention expects [N,T,{cfg.dim}], got {x.shape}")
    n, tokens, d = x.shape
    H, G, hd = cfg.num_heads, cfg.num_kv_groups, cfg.head_dim

    flat = T.reshape(x, (n * tokens, d))
    q = _split_heads(T.matmul(flat, params["wq"]) + params["bq"], n, tokens, H, hd)
    k = _split_heads(T.matmul(flat, params["wk"]) + params["bk"], n, tokens, G, hd)
    v = _split_heads(T.matmul(flat, params["wv"]) + params["bv"], n, tokens, G, hd)
    if G != H:
        groups = [cfg.group_of(h) for h in range(H)]
        k = T.take(k, groups, axis=1)
        v = T.take(v, groups, axis=1)

    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, v)  # [N, H, T, hd]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n * tokens, d))
    out = T.matmul(ctx, params["wo"]) + params["bo"]
    return T.reshape(out, (n, tokens, d)), weights


def multi_head_attention(x, params: LayerParams, cfg: AttentionConfig) -> tuple[Tensor, Tensor]:
    """Standard multi-head self-attention (one K/V head per query head)."""
    if cfg.num_kv_groups != cfg.num_heads:
        raise ValueError("multi-head attention needs num_kv_groups == num_heads")
    return grouped_query_attention(x, params, cfg)


# ---------------------------------------------------------------- tokens


def tokens_from_feature_map(x) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape
    return T.reshape(x, (n, h * w, c))


def feature_map_from_tokens(tokens, height: int, width: int) -> Tensor:
    tokens = as_tensor(tokens)
    n, t, c = tokens.shape
    if t != height * width:
        raise ShapeError(f"{t} tokens cannot form a {height}x{width} map")
    return T.reshape(tokens, (n, height, width, c))
