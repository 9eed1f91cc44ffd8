"""Image I/O and the two deterministic pixel operations (JPEG round trip, Gaussian blur)."""
from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def load_image(path) -> np.ndarray:
    """HxWx3 uint8 RGB."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(path, image: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def jpeg_compress(image: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG encode/decode in memory (libjpeg quality scale)."""
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality {quality} outside [1, 100]")
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, kernel radius ceil(3*sigma), reflected borders. sigma=0 is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    image = to_uint8(image)
    if sigma == 0:
        return image.copy()
    radius = max(1, math.ceil(3 * sigma))
    out = ndimage.gaussian_filter(
        image.astype(np.float64), sigma=(sigma, sigma, 0), mode="reflect", radius=(radius, radius, 0)
    )
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((to_uint8(a).astype(np.float64) - to_uint8(b).astype(np.float64)) ** 2)
    return float("inf") if mse == 0 else 10 * math.log10(255.0**2 / mse)


def laplacian_variance(image: np.ndarray) -> float:
    gray = to_uint8(image).astype(np.float64).mean(axis=2)
    return float(ndimage.laplace(gray).var())


def resize(image: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of a uint8 image to (height, width)."""
    h, w = size
    return np.asarray(Image.fromarray(to_uint8(image)).resize((w, h), Image.BILINEAR))
