"""Global/local embeddings and the attention-based fusion classifier."""
from __future__ import annotations

import torch
import torch.nn as nn

from .attention import AttentionConfig, AttentionStack
from .backbone import ResNetBackbone, pooled_deep_feature

FAKE = 1


class FusionHead(nn.Module):
    """Shared deep-feature -> embedding projection, token fusion and 2-way classifier."""

    def __init__(self, deep_dim: int, embed_dim: int, n_locals: int, use_global: bool, cfg: AttentionConfig):
        super().__init__()
        self.n_locals = n_locals
        self.use_global = use_global
        self.project = nn.Linear(deep_dim, embed_dim)
        self.attention = AttentionStack(embed_dim, cfg)
        self.classifier = nn.Linear(embed_dim, 2)

    def global_embedding(self, fused: torch.Tensor) -> torch.Tensor:
        """(N, C, H, W) fused map -> (N, embed_dim)."""
        return self.project(fused.mean(dim=(2, 3)))

    def local_embedding(self, backbone: ResNetBackbone, patches: torch.Tensor) -> torch.Tensor:
        """(M, 3, S, S) patches -> (M, embed_dim) through the shared backbone."""
        return self.project(pooled_deep_feature(backbone, patches))

    def fuse_and_classify(self, global_emb, local_embs) -> torch.Tensor:
        """global_emb: (N, E) or None; local_embs: (N, n, E) or None. Returns logits (N, 2).

        The fused embedding is the mean over all output tokens.
        """
        tokens = []
        if self.use_global:
            if global_emb is None:
                raise ValueError("global embedding required")
            tokens.append(global_emb[:, None])
        if self.n_locals:
            if local_embs is None or local_embs.shape[1] != self.n_locals:
                got = None if local_embs is None else local_embs.shape[1]
                raise ValueError(f"expected {self.n_locals} local embeddings, got {got}")
            tokens.append(local_embs)
        out = self.attention(torch.cat(tokens, dim=1))
        return self.classifier(out.mean(dim=1))


def fake_probability(logits: torch.Tensor) -> torch.Tensor:
    return logits.softmax(dim=-1)[..., FAKE]
