"""Box-consistent image augmentations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..core import CLASS_NAMES, BoundingBox, ImageSample
from .. import metrics

KINDS = frozenset({"hflip", "vflip", "crop", "brightness", "noise", "defect_paste"})
# Order in which enabled augmentations are applied.
ORDER = ("defect_paste", "crop", "hflip", "vflip", "brightness", "noise")
MAX_TRIES = 10


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.7, 1.0)
    brightness_gain: tuple[float, float] = (0.6, 1.4)
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    normal_class: int = CLASS_NAMES.index("normal")


def hflip(s: ImageSample) -> ImageSample:
    w = s.width
    boxes = [BoundingBox(w - b.x_max, b.y_min, w - b.x_min, b.y_max, b.class_id) for b in s.boxes]
    return ImageSample(s.pixels[:, :, ::-1].copy(), boxes, s.id)


def vflip(s: ImageSample) -> ImageSample:
    h = s.height
    boxes = [BoundingBox(b.x_min, h - b.y_max, b.x_max, h - b.y_min, b.class_id) for b in s.boxes]
    return ImageSample(s.pixels[:, ::-1, :].copy(), boxes, s.id)


def crop(s: ImageSample, x0: int, y0: int, w: int, h: int) -> ImageSample:
    """Crop to ``[x0, x0+w) x [y0, y0+h)``; boxes whose centre leaves the crop are dropped."""
    boxes = []
    for b in s.boxes:
        cx, cy = b.center
        if not (x0 <= cx < x0 + w and y0 <= cy < y0 + h):
            continue
        moved = BoundingBox(b.x_min - x0, b.y_min - y0, b.x_max - x0, b.y_max - y0, b.class_id).clip(w, h)
        if moved is not None:
            boxes.append(moved)
    return ImageSample(s.pixels[:, y0:y0 + h, x0:x0 + w].copy(), boxes, s.id)


def random_crop(s: ImageSample, rng: np.random.Generator, scale=(0.7, 1.0)) -> ImageSample:
    for _ in range(MAX_TRIES):
        w = max(1, int(round(s.width * rng.uniform(*scale))))
        h = max(1, int(round(s.height * rng.uniform(*scale))))
        x0 = int(rng.integers(0, s.width - w + 1))
        y0 = int(rng.integers(0, s.height - h + 1))
        out = crop(s, x0, y0, w, h)
        if len(out.boxes) == len(s.boxes) or (out.boxes and len(s.boxes) > 1):
            return out
    return s


def adjust_brightness(s: ImageSample, gain: float) -> ImageSample:
    return ImageSample(np.clip(s.pixels * gain, 0.0, 1.0).astype(s.pixels.dtype), s.boxes, s.id)


def add_noise(s: ImageSample, sigma: float, rng: np.random.Generator) -> ImageSample:
    if sigma == 0:
        return s
    noisy = s.pixels + rng.normal(0.0, sigma, size=s.pixels.shape)
    return ImageSample(np.clip(noisy, 0.0, 1.0).astype(s.pixels.dtype), s.boxes, s.id)


def paste_defect(s: ImageSample, donor: ImageSample, rng: np.random.Generator,
                 normal_class: int = CLASS_NAMES.index("normal")) -> ImageSample:
    """Composite one defect patch (and its box) from ``donor`` onto ``s``.

    The patch keeps its donor position when it fits, otherwise it is moved
    inside the image. It must not overlap an existing defect box; a normal
    box it overlaps is removed, since that cigarette is no longer normal.
    """
    candidates = [b for b in donor.boxes if b.class_id != normal_class]
    if not candidates:
        return s
    src = candidates[int(rng.integers(len(candidates)))]
    sx0, sy0 = int(np.floor(src.x_min)), int(np.floor(src.y_min))
    sx1, sy1 = int(np.ceil(src.x_max)), int(np.ceil(src.y_max))
    pw, ph = sx1 - sx0, sy1 - sy0
    if pw > s.width or ph > s.height:
        return s
    patch = donor.pixels[:, sy0:sy1, sx0:sx1]
    for attempt in range(MAX_TRIES):
        if attempt == 0 and sx1 <= s.width and sy1 <= s.height:
            tx, ty = sx0, sy0
        else:
            tx = int(rng.integers(0, s.width - pw + 1))
            ty = int(rng.integers(0, s.height - ph + 1))
        dx, dy = tx - sx0, ty - sy0
        new_box = BoundingBox(src.x_min + dx, src.y_min + dy, src.x_max + dx, src.y_max + dy, src.class_id)
        clash = any(b.class_id != normal_class and metrics.iou(b, new_box) > 0 for b in s.boxes)
        if clash:
            continue
        pixels = s.pixels.copy()
        pixels[:, ty:ty + ph, tx:tx + pw] = patch
        kept = [b for b in s.boxes if not (b.class_id == normal_class and metrics.iou(b, new_box) > 0)]
        return ImageSample(pixels, kept + [new_box], s.id)
    return s


def augment(s: ImageSample, kinds: Iterable[str], rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig(), donor: ImageSample | None = None) -> ImageSample:
    kinds = set(kinds)
    unknown = kinds - KINDS
    if unknown:
        raise ValueError(f"unknown augmentations {sorted(unknown)}")
    for kind in ORDER:
        if kind not in kinds:
            continue
        if kind == "defect_paste":
            if donor is not None:
                s = paste_defect(s, donor, rng, cfg.normal_class)
        elif kind == "crop":
            s = random_crop(s, rng, cfg.crop_scale)
        elif kind == "hflip":
            if rng.random() < cfg.flip_prob:
                s = hflip(s)
        elif kind == "vflip":
            if rng.random() < cfg.flip_prob:
                s = vflip(s)
        elif kind == "brightness":
            s = adjust_brightness(s, rng.uniform(*cfg.brightness_gain))
        elif kind == "noise":
            s = add_noise(s, rng.uniform(*cfg.noise_sigma), rng)
    return s
