"""Shared ResNet-50 feature extractor with shallow and deep taps.

Stage numbering: stage 1 is the stem (conv, pool) plus the first residual
group, giving a 56x56x256 map for a 224 input. Stages 2, 3/4 and 5 are the
remaining residual groups. Only four distinct resolutions exist, so stage 3
and stage 4 both resolve to the 14x14x1024 group.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.resnet import Bottleneck

from .errors import ConfigError, NumericError, PreprocessError

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# stage index -> residual group
STAGE_LAYERS = {1: "layer1", 2: "layer2", 3: "layer3", 4: "layer3", 5: "layer4"}
_LAYER_ORDER = ("layer1", "layer2", "layer3", "layer4")

# torchvision cache filenames for ImageNet ResNet-50 weights
_PRETRAINED_FILES = ("resnet50-11ad3fa6.pth", "resnet50-0676ba61.pth", "resnet50-19c8e357.pth")


@dataclass
class BackboneConfig:
    shallow_stage: int = 1
    deep_stage: int = 5
    pretrained: bool = True
    seed: int = 0
    base_width: int = 64
    blocks: tuple[int, ...] = (3, 4, 6, 3)
    input_size: int = 224
    interpolation: str = "bilinear"
    mean: tuple[float, float, float] = field(default=IMAGENET_MEAN)
    std: tuple[float, float, float] = field(default=IMAGENET_STD)

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)
        for s in (self.shallow_stage, self.deep_stage):
            if s not in STAGE_LAYERS:
                raise ConfigError(f"stage {s} not in 1..5")
        order = _LAYER_ORDER.index
        if order(STAGE_LAYERS[self.shallow_stage]) >= order(STAGE_LAYERS[self.deep_stage]):
            raise ConfigError(
                f"shallow_stage {self.shallow_stage} must come before deep_stage {self.deep_stage}"
            )
        if len(self.blocks) != 4:
            raise ConfigError("blocks must list four residual group depths")

    def stage_channels(self, stage: int) -> int:
        group = _LAYER_ORDER.index(STAGE_LAYERS[stage])
        return self.base_width * (2**group) * Bottleneck.expansion

    def stage_size(self, stage: int) -> int:
        group = _LAYER_ORDER.index(STAGE_LAYERS[stage])
        return self.input_size // (4 * 2**group)


def to_image_tensor(image, size: int = 224) -> torch.Tensor:
    """Convert an HxWx3 array (uint8 or float in [0,1]) to a 3xSxS float tensor in [0,1].

    Aspect ratio is not preserved.
    """
    if isinstance(image, torch.Tensor):
        t = image.detach().float()
        if t.ndim != 3 or t.shape[0] != 3:
            raise PreprocessError(f"expected a 3xHxW tensor, got {tuple(t.shape)}")
    else:
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise PreprocessError(f"expected an HxWx3 image, got shape {arr.shape}")
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)
    if not torch.isfinite(t).all():
        raise PreprocessError("image contains non-finite values")
    if t.shape[1:] != (size, size):
        t = F.interpolate(t[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    return t.clamp(0.0, 1.0)


def _find_pretrained() -> Path | None:
    env = os.environ.get("GLFF_PRETRAINED")
    if env:
        return Path(env)
    cache = Path(torch.hub.get_dir()) / "checkpoints"
    for name in _PRETRAINED_FILES:
        if (cache / name).exists():
            return cache / name
    return None


class ResNetBackbone(nn.Module):
    """ResNet-50 layout (torchvision parameter names) with optional width scaling."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        g = torch.Generator().manual_seed(cfg.seed)
        self.register_buffer("mean", torch.tensor(cfg.mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(cfg.std).view(1, 3, 1, 1))
        self.conv1 = nn.Conv2d(3, w, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(w)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self._inplanes = w
        self.layer1 = self._make_layer(w, cfg.blocks[0])
        self.layer2 = self._make_layer(w * 2, cfg.blocks[1], stride=2)
        self.layer3 = self._make_layer(w * 4, cfg.blocks[2], stride=2)
        self.layer4 = self._make_layer(w * 8, cfg.blocks[3], stride=2)
        self._init_weights(g)
        if cfg.pretrained:
            self._load_pretrained()

    def _make_layer(self, planes, blocks, stride=1):
        downsample = None
        if stride != 1 or self._inplanes != planes * Bottleneck.expansion:
            downsample = nn.Sequential(
                nn.Conv2d(self._inplanes, planes * Bottleneck.expansion, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes * Bottleneck.expansion),
            )
        layers = [Bottleneck(self._inplanes, planes, stride, downsample)]
        self._inplanes = planes * Bottleneck.expansion
        layers += [Bottleneck(self._inplanes, planes) for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def _init_weights(self, g: torch.Generator):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.normal_(0.0, (2.0 / fan_out) ** 0.5, generator=g)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _load_pretrained(self):
        if self.cfg.base_width != 64 or self.cfg.blocks != (3, 4, 6, 3):
            log.warning("pretrained weights only fit the full-width ResNet-50; using seeded random init")
            return
        path = _find_pretrained()
        if path is None or not path.exists():
            log.warning(
                "ImageNet ResNet-50 weights not found (set GLFF_PRETRAINED); using seeded random init"
            )
            return
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        missing, unexpected = self.load_state_dict(state, strict=False)
        missing = [k for k in missing if k not in ("mean", "std")]
        if missing or unexpected:
            raise ConfigError(f"pretrained weights mismatch: missing={missing} unexpected={unexpected}")
        log.info("loaded pretrained backbone weights from %s", path)

    def forward(self, x: torch.Tensor, stages=(5,)) -> dict[int, torch.Tensor]:
        """Run up to the deepest requested stage; returns {stage: NCHW map}."""
        wanted = {STAGE_LAYERS[s] for s in stages}
        last = max(_LAYER_ORDER.index(name) for name in wanted)
        x = (x - self.mean) / self.std
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        outs = {}
        for name in _LAYER_ORDER[: last + 1]:
            x = getattr(self, name)(x)
            if name in wanted:
                outs[name] = x
        return {s: outs[STAGE_LAYERS[s]] for s in stages}


def _check_input(x: torch.Tensor, cfg: BackboneConfig):
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_size, cfg.input_size):
        raise PreprocessError(
            f"expected Nx3x{cfg.input_size}x{cfg.input_size} input, got {tuple(x.shape)}"
        )


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activations in {what}")


def extract_multiscale(backbone: ResNetBackbone, x: torch.Tensor):
    """Shallow and deep taps from a single forward pass."""
    cfg = backbone.cfg
    _check_input(x, cfg)
    taps = backbone(x, stages=(cfg.shallow_stage, cfg.deep_stage))
    shallow, deep = taps[cfg.shallow_stage], taps[cfg.deep_stage]
    _check_finite(shallow, "shallow tap")
    _check_finite(deep, "deep tap")
    return shallow, deep


def deep_tap(backbone: ResNetBackbone, x: torch.Tensor) -> torch.Tensor:
    cfg = backbone.cfg
    _check_input(x, cfg)
    deep = backbone(x, stages=(cfg.deep_stage,))[cfg.deep_stage]
    _check_finite(deep, "deep tap")
    return deep


def pooled_deep_feature(backbone: ResNetBackbone, x: torch.Tensor) -> torch.Tensor:
    """Spatial mean of the deep tap, shape (N, C_deep)."""
    return deep_tap(backbone, x).mean(dim=(2, 3))
