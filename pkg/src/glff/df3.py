"""Robustness test-set construction: common post-processing, adversarial
perturbation, multi-image (video) compression and their mixtures.

Every processed image comes with the ordered list of operations and
parameters that produced it, so JPEG/blur results can be replayed exactly.
"""
from __future__ import annotations

import logging
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .detector import fit_input
from .errors import ConfigError, EncoderNotFoundError
from .imaging import gaussian_blur, jpeg_compress, load_image, resize, save_image, to_uint8
from .manifest import SampleRecord, op

log = logging.getLogger(__name__)

ENCODER_ENV = "GLFF_ENCODER"

# Combinations of the mixed protocol; "blend" needs an external face-swap model
# and is dropped at run time, leaving the implementable suffix.
DEFAULT_MIX_COMBOS = (
    ("blend", "common"),
    ("blend", "multicompress"),
    ("multicompress", "adversarial"),
    ("blend", "common", "adversarial"),
    ("blend", "multicompress", "adversarial"),
)
MIX_OPS = ("common", "multicompress", "adversarial")


@dataclass
class ProtocolConfig:
    jpeg_quality_range: tuple[int, int] = (20, 90)
    blur_sigma_range: tuple[float, float] = (1.0, 4.0)
    video_crf: int = 22
    group_size: int = 25
    fps: int = 25
    adv_steps: int = 100
    adv_step_size: float = 0.01
    adv_l2_budget: float = 3.0
    adv_confidence: float = 0.0
    mix_combos: list = field(default_factory=lambda: [list(c) for c in DEFAULT_MIX_COMBOS])
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.jpeg_quality_range
        if not 1 <= lo <= hi <= 100:
            raise ConfigError(f"bad JPEG quality range {self.jpeg_quality_range}")
        lo, hi = self.blur_sigma_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad blur sigma range {self.blur_sigma_range}")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if self.adv_steps < 0 or self.adv_l2_budget < 0:
            raise ConfigError("adversarial steps and budget must be >= 0")
        if not self.mix_combos:
            raise ConfigError("mix_combos is empty")
        for combo in self.mix_combos:
            unknown = set(combo) - set(MIX_OPS) - {"blend"}
            if unknown or not implementable(combo):
                raise ConfigError(f"bad mix combination {combo}")


def implementable(combo) -> list:
    return [name for name in combo if name != "blend"]


def item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, index)))


# -- common post-processing --------------------------------------------------

def sample_jpeg_quality(cfg: ProtocolConfig, rng) -> int:
    lo, hi = cfg.jpeg_quality_range
    return int(rng.integers(lo, hi + 1))


def sample_blur_sigma(cfg: ProtocolConfig, rng) -> float:
    lo, hi = cfg.blur_sigma_range
    return float(rng.uniform(lo, hi))


def common_postprocess(image: np.ndarray, cfg: ProtocolConfig, rng):
    """Uniformly one of JPEG, blur, blur-then-JPEG. Returns (image, ops)."""
    branch = int(rng.integers(3))
    ops = []
    if branch in (1, 2):
        ops.append(op("blur", sigma=sample_blur_sigma(cfg, rng)))
    if branch in (0, 2):
        ops.append(op("jpeg", quality=sample_jpeg_quality(cfg, rng)))
    return replay_ops(image, ops), ops


def replay_ops(image: np.ndarray, ops) -> np.ndarray:
    """Re-apply recorded per-image deterministic ops (jpeg, blur) in order."""
    out = to_uint8(image)
    for o in ops:
        name, params = o["name"], o.get("params", {})
        if name == "jpeg":
            out = jpeg_compress(out, params["quality"])
        elif name == "blur":
            out = gaussian_blur(out, params["sigma"])
        else:
            raise ValueError(f"op {name!r} cannot be replayed on a single image")
    return out


# -- multi-image compression -------------------------------------------------

def resolve_encoder() -> str:
    """ffmpeg binary: $GLFF_ENCODER, then PATH, then the imageio-ffmpeg bundle."""
    env = os.environ.get(ENCODER_ENV)
    if env:
        if not (os.path.isfile(env) and os.access(env, os.X_OK)):
            raise EncoderNotFoundError(f"{ENCODER_ENV}={env} is not an executable file")
        return env
    found = shutil.which("ffmpeg")
    if found:
        return found
    try:
        import imageio_ffmpeg
        return imageio_ffmpeg.get_ffmpeg_exe()
    except (ImportError, RuntimeError):
        pass
    raise EncoderNotFoundError(
        f"no H.264 encoder found; set {ENCODER_ENV} to the absolute path of an ffmpeg binary with libx264"
    )


def encode_sequence(frames, cfg: ProtocolConfig, encoder: str | None = None):
    """Encode equally sized uint8 frames as one H.264 sequence and decode them back."""
    encoder = encoder or resolve_encoder()
    h, w = frames[0].shape[:2]
    ph, pw = h + h % 2, w + w % 2  # yuv420p needs even sides
    raw = b"".join(np.ascontiguousarray(to_uint8(f)).tobytes() for f in frames)
    with tempfile.TemporaryDirectory() as tmp:
        video = Path(tmp) / "seq.mp4"
        enc = [
            encoder, "-hide_banner", "-loglevel", "error", "-y",
            "-f", "rawvideo", "-pix_fmt", "rgb24", "-s", f"{w}x{h}", "-r", str(cfg.fps), "-i", "-",
            "-an", "-vf", f"pad={pw}:{ph}:0:0",
            "-c:v", "libx264", "-crf", str(cfg.video_crf), "-preset", "medium",
            "-pix_fmt", "yuv420p", "-threads", "1", str(video),
        ]
        dec = [
            encoder, "-hide_banner", "-loglevel", "error", "-i", str(video),
            "-vf", f"format=rgb24,crop={w}:{h}:0:0", "-fps_mode", "passthrough",
            "-f", "rawvideo", "-pix_fmt", "rgb24", "-",
        ]
        try:
            subprocess.run(enc, input=raw, check=True, capture_output=True)
            out = subprocess.run(dec, check=True, capture_output=True).stdout
        except subprocess.CalledProcessError as exc:
            raise RuntimeError(f"encoder failed: {exc.stderr.decode(errors='replace').strip()}") from exc
    frame_bytes = h * w * 3
    if len(out) != frame_bytes * len(frames):
        raise RuntimeError(f"decoded {len(out) / frame_bytes:g} frames, expected {len(frames)}")
    return [np.frombuffer(out[i * frame_bytes:(i + 1) * frame_bytes], np.uint8).reshape(h, w, 3).copy()
            for i in range(len(frames))]


def make_groups(n: int, group_size: int, rng=None):
    """Index groups of at most group_size; shuffled membership when rng is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [sorted(int(i) for i in order[s:s + group_size]) for s in range(0, n, group_size)]


def multi_image_compress(images, cfg: ProtocolConfig, rng=None, encoder: str | None = None, with_ops=False):
    """Compress images as H.264 sequences of ``group_size`` frames.

    Output count and order match the input. Images in a group whose size
    differs from the group's first image are resized to it.
    """
    if not images:
        raise ValueError("no images to compress")
    encoder = encoder or resolve_encoder()
    outputs = [None] * len(images)
    ops = [None] * len(images)
    for gid, members in enumerate(make_groups(len(images), cfg.group_size, rng)):
        first = to_uint8(images[members[0]])
        frames = []
        for i in members:
            img = to_uint8(images[i])
            if img.shape != first.shape:
                log.warning("image %d resized from %s to %s for its sequence", i, img.shape, first.shape)
                img = resize(img, first.shape[:2])
            frames.append(img)
        for pos, (i, out) in enumerate(zip(members, encode_sequence(frames, cfg, encoder))):
            outputs[i] = out
            ops[i] = op("multicompress", codec="h264", crf=cfg.video_crf, fps=cfg.fps,
                        group=gid, group_len=len(members), frame=pos)
    return (outputs, ops) if with_ops else outputs


# -- adversarial perturbation ------------------------------------------------

def adversarial_perturb(image, detector, cfg: ProtocolConfig):
    """CW-style L2 attack pushing the detector towards "real".

    Minimises max(z_fake - z_real + confidence, 0) with Adam on an additive
    perturbation, projected after every step onto the L2 ball of radius
    ``adv_l2_budget`` and the [0, 1] pixel box. The lowest-scoring iterate is
    returned. Accepts HxWx3 arrays (uint8 or [0,1] floats) or 3xHxW tensors;
    returns the same kind, as float in [0, 1].
    """
    as_array = not isinstance(image, torch.Tensor)
    if as_array:
        arr = np.asarray(image)
        arr = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)
        x0 = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)[None]
    else:
        x0 = image.detach().float()[None]
    if cfg.adv_steps == 0:
        return np.asarray(image).copy() if as_array else image.clone()
    if not callable(getattr(detector, "logits", None)):
        raise TypeError("adversarial_perturb needs a differentiable detector exposing logits()")

    def margin(x):
        z = detector.logits(fit_input(detector, x))
        return z[:, 1] - z[:, 0]

    delta = torch.zeros_like(x0, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=cfg.adv_step_size)
    best, best_margin = x0.clone(), float("inf")
    with torch.enable_grad():
        for _ in range(cfg.adv_steps):
            x = (x0 + delta).clamp(0, 1)
            m = margin(x)
            if m.item() < best_margin:
                best, best_margin = x.detach().clone(), m.item()
            loss = (m + cfg.adv_confidence).clamp(min=0).sum()
            if loss.item() == 0:
                break
            grad, = torch.autograd.grad(loss, delta)
            delta.grad = grad
            opt.step()
            with torch.no_grad():
                norm = delta.norm()
                if norm > cfg.adv_l2_budget:
                    delta.mul_(cfg.adv_l2_budget / norm)
                delta.copy_((x0 + delta).clamp(0, 1) - x0)
        with torch.no_grad():
            x = (x0 + delta).clamp(0, 1)
            if margin(x).item() < best_margin:
                best = x
    out = best[0]
    return out.permute(1, 2, 0).numpy().copy() if as_array else out


# -- mixtures and batch processing -------------------------------------------

def _apply(name, images, idx, cfg, rngs, detector, ops, encoder=None, group_rng=None):
    if name == "common":
        for i in idx:
            images[i], new = common_postprocess(images[i], cfg, rngs[i])
            ops[i] += new
    elif name == "multicompress":
        if idx:
            outs, new = multi_image_compress([images[i] for i in idx], cfg, group_rng, encoder, with_ops=True)
            for i, out, o in zip(idx, outs, new):
                images[i] = out
                ops[i].append(o)
    elif name == "adversarial":
        if detector is None:
            raise ConfigError("the adversarial step needs a detector (--ckpt)")
        for i in idx:
            pert = adversarial_perturb(images[i], detector, cfg)
            before = to_uint8(images[i]).astype(np.float64) / 255.0
            images[i] = to_uint8(pert)
            ops[i].append(op("adversarial", steps=cfg.adv_steps, step_size=cfg.adv_step_size,
                             l2_budget=cfg.adv_l2_budget,
                             l2=round(float(np.linalg.norm(pert.astype(np.float64) - before)), 6)))
    else:
        raise ConfigError(f"unknown operation {name!r}")


def mixed(images, cfg: ProtocolConfig, rng, detector=None, encoder=None):
    """Per image, one uniformly chosen combination from cfg.mix_combos, applied in order.

    Returns (images, ops). Multi-image compression steps are batched across
    all images that reach them at the same position.
    """
    combos = [implementable(c) for c in cfg.mix_combos]
    if not combos:
        raise ConfigError("mix_combos is empty")
    if any("blend" in c for c in cfg.mix_combos):
        log.warning("face blending is external; mixed combinations run without their blend step")
    n = len(images)
    choice = rng.integers(len(combos), size=n)
    plan = [combos[c] for c in choice]
    images = [to_uint8(im) for im in images]
    ops = [[] for _ in range(n)]
    rngs = [np.random.default_rng(rng.integers(2**63)) for _ in range(n)]
    group_rng = np.random.default_rng(rng.integers(2**63))
    for pos in range(max(len(p) for p in plan)):
        for name in MIX_OPS:
            idx = [i for i in range(n) if len(plan[i]) > pos and plan[i][pos] == name]
            _apply(name, images, idx, cfg, rngs, detector, ops, encoder, group_rng)
    return images, ops


PROCESS_PROTOCOLS = ("common", "antiforensics", "multicompress", "mixed")


def process_directory(paths, protocol: str, cfg: ProtocolConfig, out_dir, generator: str,
                      label: int = 1, detector=None, names=None):
    """Apply one protocol to every image; writes PNGs under out_dir, returns SampleRecords.

    ``names`` are output paths relative to out_dir (default: input stem + .png).
    """
    if protocol not in PROCESS_PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; choose from {PROCESS_PROTOCOLS}")
    if not paths:
        raise ConfigError("no input images")
    out_dir = Path(out_dir)
    images = [load_image(p) for p in paths]
    n = len(images)
    ops = [[] for _ in range(n)]
    if protocol == "common":
        rngs = [item_rng(cfg.seed, i) for i in range(n)]
        _apply("common", images, list(range(n)), cfg, rngs, detector, ops)
    elif protocol == "antiforensics":
        _apply("adversarial", images, list(range(n)), cfg, None, detector, ops)
    elif protocol == "multicompress":
        group_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
        _apply("multicompress", images, list(range(n)), cfg, None, detector, ops,
               resolve_encoder(), group_rng)
    else:
        needs_encoder = any("multicompress" in c for c in cfg.mix_combos)
        images, ops = mixed(images, cfg, np.random.default_rng(cfg.seed), detector,
                            resolve_encoder() if needs_encoder else None)
    names = names or [Path(p).stem + ".png" for p in paths]
    if len(set(names)) != len(names):
        raise ConfigError("output names collide")
    records = []
    for name, img, o in zip(names, images, ops):
        save_image(out_dir / name, img)
        records.append(SampleRecord(Path(name).as_posix(), label, generator, protocol, o))
    return records
