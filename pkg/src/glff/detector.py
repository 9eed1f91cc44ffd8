"""The scoring contract shared by evaluation and the adversarial protocol.

A detector maps a batch of (N, 3, H, W) images in [0, 1] to fake
probabilities of shape (N,). Detectors that also expose ``logits`` returning
(N, 2) real/fake logits are differentiable and can be attacked.
"""
from __future__ import annotations

from typing import Protocol, runtime_checkable

import torch
import torch.nn.functional as F


@runtime_checkable
class Detector(Protocol):
    def fake_probability(self, x: torch.Tensor) -> torch.Tensor: ...


def input_size(detector) -> int | None:
    cfg = getattr(detector, "cfg", None)
    backbone = getattr(cfg, "backbone", None)
    return getattr(backbone, "input_size", None) or getattr(detector, "input_size", None)


def fit_input(detector, x: torch.Tensor) -> torch.Tensor:
    """Bilinearly resize a batch to the detector's input size, if it declares one."""
    size = input_size(detector)
    if size and x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x


class ConstantDetector:
    """Uninformative scorer, handy as a baseline."""

    def __init__(self, value: float = 0.5):
        self.value = value

    def fake_probability(self, x):
        return torch.full((x.shape[0],), float(self.value))
