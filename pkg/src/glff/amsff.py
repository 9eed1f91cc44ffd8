"""Attention-based multi-scale feature fusion.

Every pixel of the deep map becomes one token set: the deep pixel vector
followed by the k shallow pixel vectors of the co-located, non-overlapping
shallow patch. The attention output at the deep token's position is written
back as the fused pixel, so the fused map has the deep map's shape.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .attention import AttentionConfig, AttentionStack
from .errors import ConfigError


def patch_factor(shallow_hw, deep_hw):
    (hl, wl), (hh, wh) = shallow_hw, deep_hw
    if hl % hh or wl % wh:
        raise ConfigError(f"shallow map {hl}x{wl} is not divisible by deep map {hh}x{wh}")
    return hl // hh, wl // wh


def partition_lowlevel(shallow: torch.Tensor, deep_hw) -> torch.Tensor:
    """Split an (N, C, H_l, W_l) map into per-deep-pixel token lists.

    Returns (N, H_h, W_h, k, C); the k vectors of each list are the shallow
    pixels of the matching patch in row-major order.
    """
    n, c, hl, wl = shallow.shape
    hh, wh = deep_hw
    rh, rw = patch_factor((hl, wl), (hh, wh))
    t = shallow.reshape(n, c, hh, rh, wh, rw)
    t = t.permute(0, 2, 4, 3, 5, 1)  # N, H_h, W_h, rh, rw, C
    return t.reshape(n, hh, wh, rh * rw, c)


class TokenProjector(nn.Module):
    """Brings shallow (C_l) and deep (C_h) vectors to a common token width."""

    def __init__(self, low_dim: int, high_dim: int, model_dim: int):
        super().__init__()
        self.low = nn.Linear(low_dim, model_dim)
        self.high = nn.Identity() if high_dim == model_dim else nn.Linear(high_dim, model_dim)

    def forward(self, high, lows):
        """high: (..., C_h), lows: (..., k, C_l) -> tokens (..., k + 1, D), deep token first."""
        return torch.cat([self.high(high).unsqueeze(-2), self.low(lows)], dim=-2)


def project_tokens(high, lows, projector: TokenProjector):
    return projector(high, lows)


class AMSFF(nn.Module):
    def __init__(self, low_dim: int, high_dim: int, cfg: AttentionConfig):
        super().__init__()
        model_dim = cfg.model_dim or high_dim
        if model_dim != high_dim:
            # the fused map keeps the deep map's channel count
            raise ConfigError(f"model_dim {model_dim} must equal the deep channel count {high_dim}")
        self.cfg = cfg
        self.projector = TokenProjector(low_dim, high_dim, model_dim)
        self.attention = AttentionStack(model_dim, cfg)
        self.calls = 0
        # exact reformulation, pays off when the shallow width is well below model_dim
        self.low_rank_first_layer = low_dim * 2 < model_dim

    def tokens(self, shallow, deep):
        n, ch, hh, wh = deep.shape
        lows = partition_lowlevel(shallow, (hh, wh))
        high = deep.permute(0, 2, 3, 1)
        tok = self.projector(high, lows)
        return tok.reshape(n * hh * wh, tok.shape[-2], tok.shape[-1])

    def _first_layer_qkv(self, high, lows):
        # W (P x + b) == (W P) x + W b: project the narrow shallow vectors once
        # instead of multiplying every widened token by the full D x D matrices.
        layer = self.attention.layers[0]
        low = self.projector.low
        if len(self.attention.layers) == 1:
            return None  # only token 0 is queried; nothing to save
        out = []
        for w in (layer.w_q, layer.w_k, layer.w_v):
            w_low = w.weight @ low.weight
            b_low = w.weight @ low.bias
            out.append(torch.cat([w(self.projector.high(high))[:, None], lows @ w_low.T + b_low], dim=1))
        return tuple(out)

    def forward(self, shallow, deep):
        """(N, C_l, H_l, W_l), (N, C_h, H_h, W_h) -> fused (N, C_h, H_h, W_h)."""
        self.calls += 1
        n, ch, hh, wh = deep.shape
        lows = partition_lowlevel(shallow, (hh, wh)).reshape(n * hh * wh, -1, shallow.shape[1])
        high = deep.permute(0, 2, 3, 1).reshape(n * hh * wh, ch)
        tokens = self.projector(high, lows)
        qkv = self._first_layer_qkv(high, lows) if self.low_rank_first_layer else None
        out = self.attention(tokens, first_only=True, qkv=qkv)
        return out[:, 0].reshape(n, hh, wh, ch).permute(0, 3, 1, 2)


def fuse(shallow, deep, amsff: AMSFF):
    return amsff(shallow, deep)
