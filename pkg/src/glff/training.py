"""End-to-end training with blur/JPEG augmentation and Adam."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .backbone import to_image_tensor
from .errors import ConfigError, NumericError
from .imaging import gaussian_blur, jpeg_compress, list_images, load_image
from .model import GLFF, GLFFConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "loss", "lr", "seconds")


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    augment_prob: float = 0.1
    augment_mode: str = "independent"  # or "joint": one draw gates both ops
    blur_sigma_range: tuple[float, float] = (0.0, 3.0)
    jpeg_quality_range: tuple[int, int] = (30, 100)
    max_steps: int = 1000
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ConfigError("augment_prob must lie in [0, 1]")
        if self.augment_mode not in ("independent", "joint"):
            raise ConfigError("augment_mode must be 'independent' or 'joint'")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and max_steps >= 0")
        lo, hi = self.jpeg_quality_range
        if not 1 <= lo <= hi <= 100:
            raise ConfigError(f"bad JPEG quality range {self.jpeg_quality_range}")
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        self.jpeg_quality_range = tuple(self.jpeg_quality_range)


def sample_rng(seed: int, sample_id: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, sample_id, epoch])


def augment_decisions(cfg: TrainConfig, rng):
    """(blur sigma or None, JPEG quality or None). Always consumes four draws."""
    u_blur, u_jpeg = rng.random(2)
    sigma = float(rng.uniform(*cfg.blur_sigma_range))
    quality = int(rng.integers(cfg.jpeg_quality_range[0], cfg.jpeg_quality_range[1] + 1))
    if cfg.augment_mode == "joint":
        fire = u_blur < cfg.augment_prob
        return (sigma, quality) if fire else (None, None)
    return (sigma if u_blur < cfg.augment_prob else None,
            quality if u_jpeg < cfg.augment_prob else None)


def augment(image: np.ndarray, cfg: TrainConfig, rng) -> np.ndarray:
    """Blur then JPEG, each when its draw fires; applied before resizing."""
    sigma, quality = augment_decisions(cfg, rng)
    if sigma is not None:
        image = gaussian_blur(image, sigma)
    if quality is not None:
        image = jpeg_compress(image, quality)
    return image


class TrainingSet:
    def __init__(self, real_dir, fake_dir):
        self.samples, self.skipped = [], 0
        for directory, label in ((real_dir, 0), (fake_dir, 1)):
            directory = Path(directory)
            if not directory.is_dir():
                raise ConfigError(f"not a directory: {directory}")
            found = 0
            for p in list_images(directory):
                try:
                    with Image.open(p) as im:
                        im.verify()
                except (UnidentifiedImageError, OSError):
                    self.skipped += 1
                    continue
                self.samples.append((p, label))
                found += 1
            if not found:
                raise ConfigError(f"no readable images in {directory}")
        if self.skipped:
            log.warning("skipped %d unreadable images", self.skipped)

    def __len__(self):
        return len(self.samples)

    def batch_indices(self, step: int, batch_size: int, seed: int):
        """Stateless sampler: step -> sample indices, reshuffled every epoch."""
        n = len(self)
        bs = min(batch_size, n)
        per_epoch = n // bs
        epoch, j = divmod(step, per_epoch)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        return epoch, perm[j * bs:(j + 1) * bs]

    def load(self, indices, size: int, cfg: TrainConfig | None = None, epoch: int = 0):
        """Stack images (augmented when cfg is given) into (N, 3, S, S) plus labels."""
        xs, ys = [], []
        for i in indices:
            path, label = self.samples[i]
            img = load_image(path)
            if cfg is not None:
                img = augment(img, cfg, sample_rng(cfg.seed, int(i), epoch))
            xs.append(to_image_tensor(img, size))
            ys.append(label)
        return torch.stack(xs), torch.tensor(ys)


def train_step(model: GLFF, optimizer, x, y, rng=None) -> float:
    model.train()
    logits = model(x, rng=rng).logits
    loss = F.cross_entropy(logits, y)
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite loss {loss.item()} (logits range [{logits.min().item()}, {logits.max().item()}])"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def train(real_dir, fake_dir, cfg: TrainConfig, out_path, model_cfg: GLFFConfig | None = None,
          resume=None, log_path=None, progress=None):
    """Train and write a checkpoint to out_path; returns the checkpoint path.

    The CSV log (step,loss,lr,seconds) goes to log_path, default
    ``<out_path>.log.csv``. Resuming continues step numbering and appends.
    """
    data = TrainingSet(real_dir, fake_dir)
    out_path = Path(out_path)
    log_path = Path(log_path) if log_path else out_path.with_name(out_path.name + ".log.csv")
    start = 0
    if resume:
        model, payload = load_checkpoint(resume)
        state = payload.get("train_state") or {}
        start = int(state.get("step", 0))
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        if "optimizer" in state:
            optimizer.load_state_dict(state["optimizer"])
    else:
        model = GLFF(model_cfg or GLFFConfig())
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    size = model.cfg.backbone.input_size

    log_path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (resume and log_path.exists())
    t0 = time.perf_counter()

    def checkpoint(step):
        save_checkpoint(out_path, model, train_config=asdict(cfg),
                        train_state={"step": step, "optimizer": optimizer.state_dict()})

    with open(log_path, "w" if fresh else "a", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)
        for step in range(start, cfg.max_steps):
            epoch, idx = data.batch_indices(step, cfg.batch_size, cfg.seed)
            x, y = data.load(idx, size, cfg, epoch)
            loss = train_step(model, optimizer, x, y, rng=np.random.default_rng([cfg.seed, step, 1]))
            lr = optimizer.param_groups[0]["lr"]
            writer.writerow((step + 1, f"{loss:.6f}", f"{lr:g}", f"{time.perf_counter() - t0:.3f}"))
            f.flush()
            if progress:
                progress(step + 1, loss)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                checkpoint(step + 1)
    checkpoint(max(start, cfg.max_steps))
    model.eval()
    return out_path


@torch.no_grad()
def predict_dir(model: GLFF, data: TrainingSet, batch_size: int = 16):
    """Eval-mode fake probabilities and labels for every training sample."""
    model.eval()
    size = model.cfg.backbone.input_size
    probs, labels = [], []
    for s in range(0, len(data), batch_size):
        x, y = data.load(range(s, min(s + batch_size, len(data))), size)
        probs += model.fake_probability(x).tolist()
        labels += y.tolist()
    return np.array(probs), np.array(labels)


def cross_entropy_of_logits(logits, labels) -> float:
    """Mean 2-class cross-entropy; ln 2 for all-zero logits."""
    return float(F.cross_entropy(torch.as_tensor(logits, dtype=torch.float64),
                                 torch.as_tensor(labels)).item())

