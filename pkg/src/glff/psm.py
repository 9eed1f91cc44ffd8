"""Patch selection: window scoring on the channel-summed fused map, per-scale
greedy NMS, and mapping of the kept windows to crop rectangles on the input."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowSpec:
    height: int
    width: int
    count: int
    crop_size: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError("window sides must be >= 1")
        if self.count < 1:
            raise ConfigError("window count must be >= 1")


def default_windows(input_size: int = 224):
    return [
        WindowSpec(3, 3, 3, input_size),
        WindowSpec(2, 2, 3, input_size // 2),
    ]


@dataclass
class PSMConfig:
    windows: list = field(default_factory=default_windows)
    nms_iou: float = 0.25
    input_size: int = 224

    def __post_init__(self):
        self.windows = [w if isinstance(w, WindowSpec) else WindowSpec(**w) for w in self.windows]
        if not self.windows:
            raise ConfigError("at least one window spec is required")
        for w in self.windows:
            if w.crop_size > self.input_size:
                raise ConfigError(f"crop size {w.crop_size} exceeds input size {self.input_size}")

    @property
    def total(self) -> int:
        return sum(w.count for w in self.windows)


@dataclass
class PatchProposal:
    rect_feature: tuple  # (row, col, height, width) in feature cells
    score: float
    scale_tag: int = 0
    rect_image: tuple | None = None  # (top, left, size) in pixels

    @property
    def position(self):
        return self.rect_feature[:2]


def parse_windows(text: str, input_size: int = 224):
    """Parse ``"5x5:3,3x3:3"`` (optionally ``HxW:count@crop``) into WindowSpecs.

    Without an explicit crop, the first scale maps to the full input and the
    rest to half of it.
    """
    specs = []
    for i, part in enumerate(p for p in text.split(",") if p.strip()):
        try:
            size, rest = part.strip().split(":")
            h, w = (int(v) for v in size.lower().split("x"))
            if "@" in rest:
                count, crop = (int(v) for v in rest.split("@"))
            else:
                count, crop = int(rest), input_size if i == 0 else input_size // 2
        except ValueError as exc:
            raise ConfigError(f"bad window spec {part!r}; expected HxW:count[@crop]") from exc
        specs.append(WindowSpec(h, w, count, crop))
    if not specs:
        raise ConfigError("empty window spec")
    return specs


def activation_map(fused) -> np.ndarray:
    """Channel sum of a (C, H, W) fused map; float64 (H, W)."""
    if isinstance(fused, torch.Tensor):
        fused = fused.detach().to("cpu", torch.float64).numpy()
    return np.asarray(fused, dtype=np.float64).sum(axis=0)


def score_windows(amap: np.ndarray, spec: WindowSpec, scale_tag: int = 0):
    """Stride-1 window means, one proposal per position in row-major order."""
    hh, wh = amap.shape
    if spec.height > hh or spec.width > wh:
        raise ConfigError(f"{spec.height}x{spec.width} window does not fit a {hh}x{wh} map")
    views = np.lib.stride_tricks.sliding_window_view(amap, (spec.height, spec.width))
    scores = views.sum(axis=(2, 3)) / (spec.height * spec.width)
    return [
        PatchProposal((r, c, spec.height, spec.width), float(scores[r, c]), scale_tag)
        for r in range(scores.shape[0])
        for c in range(scores.shape[1])
    ]


def rect_iou(a, b) -> float:
    r0, c0 = max(a[0], b[0]), max(a[1], b[1])
    r1, c1 = min(a[0] + a[2], b[0] + b[2]), min(a[1] + a[3], b[1] + b[3])
    inter = max(0, r1 - r0) * max(0, c1 - c0)
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def nms_select(proposals, keep: int, iou_thresh: float):
    """Greedy NMS. Returns (kept, shortfall) where shortfall = keep - len(kept).

    Ties in score go to the smaller row-major position.
    """
    if keep < 1:
        raise ConfigError("keep must be >= 1")
    if len({p.scale_tag for p in proposals}) > 1:
        raise ConfigError("nms_select expects proposals from a single window scale")
    order = sorted(proposals, key=lambda p: (-p.score, p.position))
    kept = []
    for p in order:
        if all(rect_iou(p.rect_feature, k.rect_feature) <= iou_thresh for k in kept):
            kept.append(p)
            if len(kept) == keep:
                break
    return kept, keep - len(kept)


def map_to_image(p: PatchProposal, spec: WindowSpec, cfg: PSMConfig, map_size: int) -> PatchProposal:
    """Fill ``rect_image``: window centre scaled by the map stride, crop shifted inside the image."""
    size = cfg.input_size
    if spec.crop_size > size:
        raise ConfigError(f"crop size {spec.crop_size} exceeds input size {size}")
    stride = size / map_size
    row, col, h, w = p.rect_feature
    cy, cx = (row + h / 2) * stride, (col + w / 2) * stride
    half = spec.crop_size / 2
    top = int(min(max(round(cy - half), 0), size - spec.crop_size))
    left = int(min(max(round(cx - half), 0), size - spec.crop_size))
    return replace(p, rect_image=(top, left, spec.crop_size))


def select_proposals(amap: np.ndarray, cfg: PSMConfig):
    """Full selection for one image: all scales, in config order, best first within a scale.

    A scale whose NMS leaves fewer than ``count`` windows is padded by
    repeating its top proposal.
    """
    out = []
    for tag, spec in enumerate(cfg.windows):
        kept, short = nms_select(score_windows(amap, spec, tag), spec.count, cfg.nms_iou)
        if short:
            log.debug("scale %dx%d: %d of %d windows survive NMS, padding with the top one",
                      spec.height, spec.width, len(kept), spec.count)
            kept = kept + [kept[0]] * short
        out += [map_to_image(p, spec, cfg, amap.shape[0]) for p in kept]
    return out


def random_proposals(map_shape, cfg: PSMConfig, rng: np.random.Generator):
    """Uniformly drawn window positions per scale, no NMS (the PSM ablation)."""
    hh, wh = map_shape
    out = []
    for tag, spec in enumerate(cfg.windows):
        if spec.height > hh or spec.width > wh:
            raise ConfigError(f"{spec.height}x{spec.width} window does not fit a {hh}x{wh} map")
        for _ in range(spec.count):
            r = int(rng.integers(0, hh - spec.height + 1))
            c = int(rng.integers(0, wh - spec.width + 1))
            p = PatchProposal((r, c, spec.height, spec.width), float("nan"), tag)
            out.append(map_to_image(p, spec, cfg, hh))
    return out


def crop_patches(image: torch.Tensor, proposals, out_size: int = 224) -> torch.Tensor:
    """Crop each proposal's rect from a (3, H, W) image and resize bilinearly.

    Returns (n, 3, out_size, out_size) in proposal order. Differentiable
    w.r.t. pixel values, not w.r.t. the rectangles.
    """
    if not proposals:
        raise ValueError("no proposals to crop")
    crops = []
    for p in proposals:
        top, left, size = p.rect_image
        if top < 0 or left < 0 or top + size > image.shape[1] or left + size > image.shape[2]:
            raise ValueError(f"crop {p.rect_image} outside image of shape {tuple(image.shape)}")
        crop = image[:, top : top + size, left : left + size][None]
        if size != out_size:
            crop = F.interpolate(crop, size=(out_size, out_size), mode="bilinear", align_corners=False)
        crops.append(crop)
    return torch.cat(crops)
