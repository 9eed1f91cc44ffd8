"""Multi-head scaled dot-product attention blocks shared by AMSFF and the fusion head.

Each layer is self-attention over the token set, a residual connection and
layer normalisation. There is no feed-forward sublayer and no positional
encoding, so the blocks are permutation-equivariant over tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


@dataclass
class AttentionConfig:
    num_layers: int = 3
    num_heads: int = 4
    model_dim: int | None = None  # None: take the width of the tokens being fused

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.num_heads < 1:
            raise ConfigError("num_heads must be >= 1")
        if self.model_dim is not None:
            self.check_dim(self.model_dim)

    def check_dim(self, dim: int):
        if dim % self.num_heads:
            raise ConfigError(f"model_dim {dim} not divisible by {self.num_heads} heads")

    def key_dim(self, dim: int) -> int:
        return dim // self.num_heads


class AttentionLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"width {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)
        self.norm = nn.LayerNorm(dim)

    def _heads(self, t):
        b, n, _ = t.shape
        return t.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, n_queries: int | None = None, qkv=None, need_weights: bool = True):
        """x: (B, T, D). Only the first ``n_queries`` tokens are updated when given.

        ``qkv`` may carry already-projected (q, k, v) for ``x``.
        Returns (output, attention weights of shape (B, heads, Tq, T) or None
        when ``need_weights`` is off).
        """
        if x.shape[-1] != self.dim:
            raise ConfigError(f"token width {x.shape[-1]} does not match layer width {self.dim}")
        xq = x if n_queries is None else x[:, :n_queries]
        if n_queries is not None and qkv is None:
            return self._few_queries(x, xq)
        if qkv is None:
            qkv = self.w_q(xq), self.w_k(x), self.w_v(x)
        q, k, v = (self._heads(t) for t in qkv)
        if need_weights:
            attn = (q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)).softmax(dim=-1)
            heads = attn @ v
        else:
            attn = None
            heads = F.scaled_dot_product_attention(q, k, v)
        heads = heads.transpose(1, 2).reshape(xq.shape[0], xq.shape[1], self.dim)
        return self.norm(xq + self.w_o(heads)), attn

    def _few_queries(self, x, xq):
        # Same result as the full path, reassociated: q.(W_k x) = (W_k^T q).x and
        # sum_j a_j W_v x_j = W_v (sum_j a_j x_j), so keys and values are never
        # materialised for every token.
        h, d = self.num_heads, self.head_dim
        q = self._heads(self.w_q(xq))  # B, h, Tq, d
        wk = self.w_k.weight.view(h, d, self.dim)
        wv = self.w_v.weight.view(h, d, self.dim)
        u = torch.einsum("bhqd,hdD->bhqD", q, wk)
        attn = (torch.einsum("bhqD,btD->bhqt", u, x) / math.sqrt(d)).softmax(dim=-1)
        z = torch.einsum("bhqt,btD->bhqD", attn, x)
        heads = torch.einsum("bhqD,hdD->bqhd", z, wv).reshape(xq.shape[0], xq.shape[1], self.dim)
        return self.norm(xq + self.w_o(heads)), attn


class AttentionStack(nn.Module):
    def __init__(self, dim: int, cfg: AttentionConfig):
        super().__init__()
        cfg.check_dim(dim)
        self.dim = dim
        self.layers = nn.ModuleList(AttentionLayer(dim, cfg.num_heads) for _ in range(cfg.num_layers))

    def forward(self, x, first_only: bool = False, return_weights: bool = False, qkv=None):
        """Run all layers. With ``first_only`` the last layer only updates token 0
        and the result has a single token (cheaper when only that token is read).
        ``qkv`` is forwarded to the first layer."""
        weights = []
        for i, layer in enumerate(self.layers):
            last = i == len(self.layers) - 1
            x, attn = layer(
                x,
                n_queries=1 if (first_only and last) else None,
                qkv=qkv if i == 0 else None,
                need_weights=return_weights,
            )
            weights.append(attn)
        return (x, weights) if return_weights else x
