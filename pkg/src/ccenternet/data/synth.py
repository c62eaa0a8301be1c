"""Deterministic synthetic cigarette-strip images with one labelled defect each.

A horizontal cigarette (white stick, darker filter on the right) lies on a
textured background. Defect images carry a single defect box; ``normal``
images carry one box around the whole cigarette.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import CLASS_NAMES, BoundingBox, DataError, RngState
from .manifest import DatasetManifest, Record
from .voc import VocAnnotation, save_image, write_voc_xml

DEFECT_CLASSES = ("dotted", "folded", "malposed", "unfiltered")


@dataclass(frozen=True)
class SynthConfig:
    per_class: int = 10
    width: int = 600
    height: int = 128
    stick_length: tuple[float, float] = (0.78, 0.9)  # fraction of image width
    stick_diameter: tuple[float, float] = (0.30, 0.40)  # fraction of image height
    filter_fraction: tuple[float, float] = (0.22, 0.30)  # fraction of cigarette length
    spot_count: tuple[int, int] = (2, 4)
    spot_radius: tuple[float, float] = (2.0, 5.0)
    spot_spread: tuple[float, float] = (15.0, 40.0)
    wrinkle_lines: tuple[int, int] = (3, 7)
    wrinkle_amplitude: tuple[float, float] = (0.15, 0.35)
    wrinkle_width: tuple[float, float] = (80.0, 150.0)
    seam_displacement: tuple[int, int] = (3, 8)
    multi_defect_rate: float = 0.0
    background_seed: int = 0
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if self.per_class < 0:
            raise ValueError("per_class must be >= 0")
        if set(self.class_names) != set(CLASS_NAMES):
            raise ValueError(f"class names must be exactly {CLASS_NAMES}")
        for name in ("stick_length", "stick_diameter", "filter_fraction", "spot_count", "spot_radius",
                     "spot_spread", "wrinkle_lines", "wrinkle_amplitude", "wrinkle_width", "seam_displacement"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} range {lo, hi} is degenerate")
        if not 0.0 <= self.multi_defect_rate <= 1.0:
            raise ValueError("multi_defect_rate must lie in [0, 1]")


@dataclass
class Geometry:
    x0: int  # left end of the stick
    length: int
    top: int
    diameter: int
    filter_len: int

    @property
    def x1(self) -> int:
        return self.x0 + self.length

    @property
    def xf(self) -> int:  # filter start
        return self.x1 - self.filter_len

    @property
    def bottom(self) -> int:
        return self.top + self.diameter

    @property
    def cy(self) -> float:
        return self.top + self.diameter / 2.0


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.22, 0.42) + rng.uniform(-0.04, 0.04, size=3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    texture = np.zeros((h, w))
    for _ in range(3):
        fx, fy = rng.uniform(0.005, 0.05, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        texture += rng.uniform(0.01, 0.03) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    texture += rng.normal(0, 0.012, size=(h, w))
    return np.clip(base[:, None, None] + texture[None], 0, 1)


def _rows_profile(g: Geometry, h: int, inset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of the cylinder and a 0..1 cylinder-brightness profile for them."""
    rows = np.arange(g.top + inset, g.bottom - inset)
    rows = rows[(rows >= 0) & (rows < h)]
    t = (rows + 0.5 - g.cy) / (g.diameter / 2.0)
    return rows, np.sqrt(np.clip(1 - t * t, 0, 1))


def _paint_stick(img: np.ndarray, g: Geometry, x_from: int, x_to: int) -> None:
    rows, prof = _rows_profile(g, img.shape[1])
    shade = 0.80 + 0.17 * prof
    for ch, tint in enumerate((1.0, 1.0, 0.98)):
        img[ch, rows, x_from:x_to] = (shade * tint)[:, None]


def _paint_filter(img: np.ndarray, g: Geometry, rng: np.random.Generator, dy: int = 0) -> None:
    shifted = Geometry(g.x0, g.length, g.top + dy, g.diameter, g.filter_len)
    rows, prof = _rows_profile(shifted, img.shape[1])
    speckle = rng.normal(0, 0.035, size=(len(rows), g.filter_len))
    for ch, col in enumerate((0.80, 0.58, 0.33)):
        img[ch, rows, g.xf:g.x1] = np.clip(col * (0.82 + 0.18 * prof)[:, None] + speckle, 0, 1)
    # gold tipping line at the joint
    for ch, col in enumerate((0.72, 0.58, 0.22)):
        img[ch, rows, g.xf:g.xf + 2] = col


def _draw_cigarette(img, g: Geometry, rng) -> None:
    _paint_stick(img, g, g.x0, g.xf)
    _paint_filter(img, g, rng)


def _box_from_mask(mask: np.ndarray, class_id: int) -> BoundingBox:
    ys, xs = np.nonzero(mask)
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1), class_id)


def _dotted(img, g: Geometry, rng, cfg: SynthConfig, class_id: int, x_range=None) -> BoundingBox:
    h, w = img.shape[1:]
    spread = rng.uniform(*cfg.spot_spread)
    lo, hi = x_range or (g.x0 + spread + 8, g.xf - spread - 8)
    cx = rng.uniform(lo, max(lo + 1, hi))
    n = int(rng.integers(cfg.spot_count[0], cfg.spot_count[1] + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    color = rng.uniform(0.08, 0.3) * np.array([1.0, 0.9, 0.8])
    for i in range(n):
        # first two spots at the ends of the cluster so its width follows the spread
        ex = cx + (spread if i == 0 else -spread if i == 1 else rng.uniform(-spread, spread))
        ey = g.cy + rng.uniform(-0.15, 0.15) * g.diameter
        rx = rng.uniform(*cfg.spot_radius)
        ry = rng.uniform(cfg.spot_radius[0], min(cfg.spot_radius[1], 0.8 * rx + 1))
        mask |= ((xx - ex) / rx) ** 2 + ((yy - ey) / ry) ** 2 <= 1.0
    for ch in range(3):
        img[ch][mask] = color[ch]
    return _box_from_mask(mask, class_id)


def _folded(img, g: Geometry, rng, cfg: SynthConfig, class_id: int, x_range=None) -> BoundingBox:
    width = int(round(rng.uniform(*cfg.wrinkle_width)))
    lo, hi = x_range or (g.x0 + 4, g.x1 - width - 4)
    xa = int(rng.integers(int(lo), max(int(lo) + 1, int(hi))))
    xb = min(xa + width, g.x1)
    rows = np.arange(g.top, g.bottom)
    cols = np.arange(xa, xb)
    yy, xx = np.meshgrid(rows.astype(float), cols.astype(float), indexing="ij")
    mod = np.zeros_like(yy)
    n = int(rng.integers(cfg.wrinkle_lines[0], cfg.wrinkle_lines[1] + 1))
    period = (xb - xa) / n
    slant = rng.uniform(-0.8, 0.8)
    amp = rng.uniform(*cfg.wrinkle_amplitude)
    for i in range(n):
        xl = xa + (i + 0.5) * period + rng.uniform(-0.2, 0.2) * period
        lw = rng.uniform(1.0, 2.5)
        u = xx - xl - slant * (yy - g.cy)
        mod += amp * np.exp(-u * u / (2 * lw * lw)) - 0.5 * amp * np.exp(-(u - 2 * lw) ** 2 / (2 * lw * lw))
    region = img[:, g.top:g.bottom, xa:xb]
    img[:, g.top:g.bottom, xa:xb] = np.clip(region * (1 - mod)[None] + 0.02 * np.sin(yy / 3.0)[None], 0, 1)
    return BoundingBox(float(xa), float(g.top), float(xb), float(g.bottom), class_id)


def _malposed(img, g: Geometry, rng, cfg: SynthConfig, class_id: int, background) -> BoundingBox:
    d = int(rng.integers(cfg.seam_displacement[0], cfg.seam_displacement[1] + 1)) * (1 if rng.random() < 0.5 else -1)
    h = img.shape[1]
    img[:, :, g.xf:g.x1] = background[:, :, g.xf:g.x1]
    _paint_filter(img, g, rng, dy=d)
    # dark seam gap between stick and displaced filter
    rows = np.arange(max(min(g.top, g.top + d), 0), min(max(g.bottom, g.bottom + d), h))
    img[:, rows, g.xf - 2:g.xf] = 0.25
    top = max(min(g.top, g.top + d), 0)
    bottom = min(max(g.bottom, g.bottom + d), h)
    return BoundingBox(float(g.xf - 10), float(top), float(g.x1), float(bottom), class_id)


def _unfiltered(img, g: Geometry, rng, cfg: SynthConfig, class_id: int, background) -> BoundingBox:
    img[:, :, g.xf:g.x1] = background[:, :, g.xf:g.x1]
    inset = 2
    rows, prof = _rows_profile(g, img.shape[1], inset)
    fibres = rng.normal(0, 1, size=(len(rows), g.filter_len))
    fibres = np.cumsum(fibres, axis=1) * 0.01  # horizontal streaks
    fibres -= fibres.mean(axis=1, keepdims=True)
    for ch, col in enumerate((0.45, 0.30, 0.15)):
        img[ch, rows, g.xf:g.x1] = np.clip(col * (0.7 + 0.3 * prof)[:, None] + fibres, 0, 1)
    return BoundingBox(float(g.xf), float(g.top + inset), float(g.x1), float(g.bottom - inset), class_id)


def render_image(label: str, rng: np.random.Generator, cfg: SynthConfig = SynthConfig()) -> tuple[np.ndarray, list[BoundingBox]]:
    """One synthetic image ``(3, H, W)`` in [0, 1] and its boxes."""
    if label not in cfg.class_names:
        raise ValueError(f"unknown class {label!r}")
    cid = cfg.class_names.index
    h, w = cfg.height, cfg.width
    background = _background(h, w, rng)
    img = background.copy()
    length = int(round(w * rng.uniform(*cfg.stick_length)))
    diameter = int(round(h * rng.uniform(*cfg.stick_diameter)))
    x0 = int(rng.integers(4, max(5, w - length - 4)))
    top = int(round(h / 2 - diameter / 2 + rng.uniform(-0.08, 0.08) * h))
    top = min(max(top, cfg.seam_displacement[1] + 1), h - diameter - cfg.seam_displacement[1] - 1)
    g = Geometry(x0, length, top, diameter, int(round(length * rng.uniform(*cfg.filter_fraction))))
    _draw_cigarette(img, g, rng)

    if label == "normal":
        boxes = [BoundingBox(float(g.x0), float(g.top), float(g.x1), float(g.bottom), cid("normal"))]
    elif label == "dotted":
        boxes = [_dotted(img, g, rng, cfg, cid("dotted"))]
    elif label == "folded":
        boxes = [_folded(img, g, rng, cfg, cid("folded"))]
    elif label == "malposed":
        boxes = [_malposed(img, g, rng, cfg, cid("malposed"), background)]
    else:
        boxes = [_unfiltered(img, g, rng, cfg, cid("unfiltered"), background)]

    if label != "normal" and rng.random() < cfg.multi_defect_rate:
        extra = "folded" if label == "dotted" else "dotted"
        for _ in range(10):
            trial = img.copy()
            fn = _dotted if extra == "dotted" else _folded
            box = fn(trial, g, rng, cfg, cid(extra), x_range=(g.x0 + 40, g.xf - 160))
            if all(box.x_max <= b.x_min or box.x_min >= b.x_max for b in boxes):
                img = trial
                boxes.append(box)
                break

    img = np.clip(img + rng.normal(0, 0.008, size=img.shape), 0, 1)
    return img, boxes


def synth_generate(cfg: SynthConfig, out_dir, seed: int = 0) -> DatasetManifest:
    """Write ``images/*.png``, ``annotations/*.xml`` and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "annotations").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    root = RngState(seed)
    records = []
    for label in cfg.class_names:
        for i in range(cfg.per_class):
            sample_id = f"{label}_{i:05d}"
            rng = root.child(f"synth/{cfg.background_seed}/{sample_id}")
            pixels, boxes = render_image(label, rng, cfg)
            image_rel = f"images/{sample_id}.png"
            xml_rel = f"annotations/{sample_id}.xml"
            try:
                save_image(pixels, out / image_rel)
                write_voc_xml(VocAnnotation(f"{sample_id}.png", cfg.width, cfg.height, tuple(boxes), "images"),
                              out / xml_rel, cfg.class_names)
            except OSError as exc:
                raise DataError(f"cannot write sample {sample_id}: {exc}") from None
            records.append(Record(sample_id, image_rel, xml_rel, label))
    manifest = DatasetManifest(records, out, seed, cfg.class_names,
                               {"width": cfg.width, "height": cfg.height, "per_class": cfg.per_class})
    manifest.save()
    return manifest


def aspect_ratio(box: BoundingBox) -> float:
    """Long side over short side."""
    return max(box.width, box.height) / min(box.width, box.height)
