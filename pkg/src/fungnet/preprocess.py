"""Image pipeline: resize, crop, flip and per-channel normalization.

Images travel as ``(H, W, 3)`` uint8 arrays in RGB order until the final
normalization step turns them into a ``(3, H, W)`` float32 tensor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor

RESIZE = 256
CROP = 224


@dataclass(frozen=True)
class NormalizationConstants:
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("normalization needs exactly three (mean, std) pairs")
        if min(self.std) <= 0:
            raise ValueError(f"std must be positive per channel, got {self.std}")


IMAGENET = NormalizationConstants()


def as_image(pixels) -> np.ndarray:
    img = np.asarray(pixels)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB buffer, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image has zero extent: {img.shape[:2]}")
    return img


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and clamped edges.

    Aspect ratio is not preserved. The result is rounded half-up to uint8.
    """
    img = as_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be >= 1, got {(out_h, out_w)}")
    h, w = img.shape[:2]
    y0, y1, wy = _axis_weights(h, out_h)
    x0, x1, wx = _axis_weights(w, out_w)
    src = img.astype(np.float64)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def crop(img, out_h: int, out_w: int, mode: str = "center",
         rng: Optional[np.random.Generator] = None) -> np.ndarray:
    img = as_image(img)
    h, w = img.shape[:2]
    if out_h > h or out_w > w:
        raise ValueError(f"cannot crop {out_h}x{out_w} from a {h}x{w} image")
    if mode == "center":
        top, left = (h - out_h) // 2, (w - out_w) // 2
    elif mode == "random":
        if rng is None:
            raise ValueError("random crop needs a seeded generator")
        top = int(rng.integers(0, h - out_h + 1))
        left = int(rng.integers(0, w - out_w + 1))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return img[top:top + out_h, left:left + out_w]


def hflip(img) -> np.ndarray:
    return as_image(img)[:, ::-1]


def normalize(img, c: NormalizationConstants = IMAGENET) -> Tensor:
    """``(pixel / 255 - mean) / std`` per channel, returned as a (3, H, W) float32 tensor."""
    img = as_image(img)
    x = img.astype(np.float64).transpose(2, 0, 1) / 255.0
    mean = np.asarray(c.mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(c.std, dtype=np.float64).reshape(3, 1, 1)
    return Tensor(((x - mean) / std).astype(np.float32))


def denormalize(t: Tensor, c: NormalizationConstants = IMAGENET) -> np.ndarray:
    """Inverse of :func:`normalize`, giving values on the [0, 1] scale."""
    mean = np.asarray(c.mean).reshape(3, 1, 1)
    std = np.asarray(c.std).reshape(3, 1, 1)
    return t.data.astype(np.float64) * std + mean


def preprocess_train(img, rng: np.random.Generator, c: NormalizationConstants = IMAGENET,
                     resize: int = RESIZE, size: int = CROP) -> Tensor:
    out = crop(resize_bilinear(img, resize, resize), size, size, "random", rng)
    if rng.random() < 0.5:
        out = hflip(out)
    return normalize(out, c)


def preprocess_eval(img, c: NormalizationConstants = IMAGENET,
                    resize: int = RESIZE, size: int = CROP) -> Tensor:
    return normalize(crop(resize_bilinear(img, resize, resize), size, size, "center"), c)


def image_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Generator for one image in one epoch; independent of processing order."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))
