"""The end-to-end two-branch detector, its configuration and checkpoint format."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .amsff import AMSFF
from .attention import AttentionConfig
from .backbone import BackboneConfig, ResNetBackbone, deep_tap, extract_multiscale, pooled_deep_feature
from .errors import ConfigError
from .fusion_head import FusionHead, fake_probability
from .psm import PSMConfig, WindowSpec, activation_map, crop_patches, parse_windows, random_proposals, select_proposals

log = logging.getLogger(__name__)

VARIANTS = ("full", "global_only", "local_only", "no_psm", "no_amsff")
CHECKPOINT_FORMAT = "glff-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class GLFFConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    amsff: AttentionConfig = field(default_factory=AttentionConfig)
    head: AttentionConfig = field(default_factory=AttentionConfig)
    psm: PSMConfig = field(default_factory=PSMConfig)
    embed_dim: int = 128
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.amsff, dict):
            self.amsff = AttentionConfig(**self.amsff)
        if isinstance(self.head, dict):
            self.head = AttentionConfig(**self.head)
        if isinstance(self.psm, dict):
            self.psm = PSMConfig(**self.psm)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.psm.input_size != self.backbone.input_size:
            raise ConfigError("psm.input_size must match backbone.input_size")
        self.head.check_dim(self.embed_dim)

    @property
    def n_locals(self) -> int:
        return 0 if self.variant == "global_only" else self.psm.total

    @property
    def use_global(self) -> bool:
        return self.variant != "local_only"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def toy(cls, **overrides) -> "GLFFConfig":
        """Narrow, shallow ResNet at 128 px; same dataflow as the full model."""
        size = 128
        cfg = dict(
            backbone=BackboneConfig(pretrained=False, base_width=4, blocks=(1, 1, 1, 1), input_size=size),
            psm=PSMConfig(windows=[WindowSpec(3, 3, 3, size), WindowSpec(2, 2, 3, size // 2)], input_size=size),
        )
        cfg.update(overrides)
        return cls(**cfg)


def apply_variant(cfg: GLFFConfig, variant: str) -> GLFFConfig:
    """Return a copy of ``cfg`` configured for an ablation variant name.

    Accepts the names in VARIANTS plus ``stage:<shallow>,<deep>`` and
    ``windows:<HxW:count,...>``.
    """
    d = cfg.to_dict()
    if variant in VARIANTS:
        d["variant"] = variant
    elif variant.startswith("stage:"):
        try:
            s, t = (int(v) for v in variant[len("stage:"):].split(","))
        except ValueError as exc:
            raise ConfigError(f"bad stage variant {variant!r}; expected stage:<s>,<d>") from exc
        d["backbone"].update(shallow_stage=s, deep_stage=t)
    elif variant.startswith("windows:"):
        size = cfg.backbone.input_size
        d["psm"]["windows"] = [asdict(w) for w in parse_windows(variant[len("windows:"):], size)]
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return GLFFConfig(**d)


class GLFFOutput(NamedTuple):
    logits: torch.Tensor
    fused: torch.Tensor
    proposals: list


class GLFF(nn.Module):
    """Two-branch detector. Input: (N, 3, S, S) pixels in [0, 1]."""

    def __init__(self, cfg: GLFFConfig | None = None):
        super().__init__()
        cfg = cfg or GLFFConfig()
        self.cfg = cfg
        bcfg = cfg.backbone
        deep_dim = bcfg.stage_channels(bcfg.deep_stage)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.backbone = ResNetBackbone(bcfg)
            self.amsff = (
                None if cfg.variant == "no_amsff"
                else AMSFF(bcfg.stage_channels(bcfg.shallow_stage), deep_dim, cfg.amsff)
            )
            self.head = FusionHead(deep_dim, cfg.embed_dim, cfg.n_locals, cfg.use_global, cfg.head)
        self.counters = Counter()
        self._rng = np.random.default_rng(cfg.seed)

    def fused_map(self, x):
        return self._fused_and_deep(x)[0]

    def _fused_and_deep(self, x):
        if self.amsff is None:
            deep = deep_tap(self.backbone, x)
            return deep, deep
        shallow, deep = extract_multiscale(self.backbone, x)
        return self.amsff(shallow, deep), deep

    def propose(self, fused, rng=None):
        """Per-image proposal lists from a batch of fused maps."""
        out = []
        for f in fused:
            if self.cfg.variant == "no_psm":
                self.counters["random_patches"] += 1
                out.append(random_proposals(f.shape[1:], self.cfg.psm, rng or self._rng))
            else:
                self.counters["psm"] += 1
                out.append(select_proposals(activation_map(f), self.cfg.psm))
        return out

    def forward(self, x: torch.Tensor, rng: np.random.Generator | None = None) -> GLFFOutput:
        cfg = self.cfg
        fused, deep = self._fused_and_deep(x)
        global_emb = self.head.global_embedding(fused) if cfg.use_global else None
        local_embs, proposals = None, []
        if cfg.n_locals:
            proposals = self.propose(fused, rng)
            if self.training:
                patches = torch.cat([crop_patches(img, props, cfg.backbone.input_size)
                                     for img, props in zip(x, proposals)])
                local_embs = self.head.local_embedding(self.backbone, patches)
            else:
                local_embs = self.head.project(self._pooled_patches(x, deep, proposals))
            local_embs = local_embs.view(x.shape[0], cfg.n_locals, -1)
        logits = self.head.fuse_and_classify(global_emb, local_embs)
        return GLFFOutput(logits, fused, proposals)

    def _pooled_patches(self, x, deep, proposals):
        """Eval-mode pooled deep features of every patch, in proposal order.

        A crop covering the whole input is the input itself, so its feature is
        the already computed deep tap; repeated rects are run once. Batch
        statistics make this invalid in training mode.
        """
        size = self.cfg.backbone.input_size
        full = deep.mean(dim=(2, 3))
        crops, slots, seen = [], [], {}
        for b, props in enumerate(proposals):
            for p in props:
                if p.rect_image == (0, 0, size):
                    slots.append((True, b))
                    continue
                key = (b, p.rect_image)
                if key not in seen:
                    seen[key] = len(crops)
                    crops.append(crop_patches(x[b], [p], size))
                slots.append((False, seen[key]))
        pooled = pooled_deep_feature(self.backbone, torch.cat(crops)) if crops else None
        return torch.stack([full[i] if is_full else pooled[i] for is_full, i in slots])

    def logits(self, x):
        return self(x).logits

    def fake_probability(self, x):
        return fake_probability(self.logits(x))


def save_checkpoint(path, model: GLFF, **extra):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "normalization": {"mean": list(model.cfg.backbone.mean), "std": list(model.cfg.backbone.std)},
        "state_dict": model.state_dict(),
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, variant: str | None = None):
    """Returns (model in eval mode, raw payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a GLFF checkpoint")
    if payload.get("version", 0) > CHECKPOINT_VERSION:
        raise ConfigError(f"{path} was written by a newer version ({payload['version']})")
    cfg = payload["config"]
    cfg["backbone"]["pretrained"] = False  # weights come from the checkpoint
    cfg = GLFFConfig(**cfg)
    if variant:
        cfg = apply_variant(cfg, variant)
    model = GLFF(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
