"""Rendering ground-truth boxes into heatmap / offset / size training targets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BoundingBox, ModelConfig

RADIUS_EPS = 1e-6


@dataclass
class TargetMaps:
    heatmap: np.ndarray  # (n_classes, h, w) in [0, 1]
    offset: np.ndarray  # (2, h, w): (dx, dy) = p/R - floor(p/R)
    size: np.ndarray  # (2, h, w): (w, h) / R
    mask: np.ndarray  # (h, w) in {0, 1}
    n: int  # number of objects, collisions included

    @property
    def n_classes(self) -> int:
        return self.heatmap.shape[0]


def _smaller_root(a: float, b: float, c: float) -> float:
    disc = max(b * b - 4 * a * c, 0.0)
    return (-b - math.sqrt(disc)) / (2 * a)


def _larger_root(a: float, b: float, c: float) -> float:
    disc = max(b * b - 4 * a * c, 0.0)
    return (-b + math.sqrt(disc)) / (2 * a)


def gaussian_radius(h: float, w: float, min_iou: float = 0.7) -> float:
    """Largest corner displacement that keeps IoU >= ``min_iou``.

    Minimum over the three cases: one corner in and one out (translation),
    both corners inward (shrink) and both outward (grow).
    """
    if h <= 0 or w <= 0:
        raise ValueError(f"box dimensions must be positive, got h={h}, w={w}")
    if not 0 < min_iou < 1:
        raise ValueError("min_iou must lie in (0, 1)")
    # (h - r)(w - r) / (2hw - (h - r)(w - r)) = iou
    r1 = _smaller_root(1.0, -(h + w), w * h * (1 - min_iou) / (1 + min_iou))
    # (h - 2r)(w - 2r) / hw = iou
    r2 = _smaller_root(4.0, -2.0 * (h + w), (1 - min_iou) * w * h)
    # hw / ((h + 2r)(w + 2r)) = iou
    r3 = _larger_root(4.0 * min_iou, 2.0 * min_iou * (h + w), (min_iou - 1) * w * h)
    return max(min(r1, r2, r3), 0.0)


def draw_gaussian(heatmap: np.ndarray, cx: int, cy: int, radius: float) -> None:
    """Max-splat an unnormalised Gaussian (sigma = radius / 3) in place."""
    sigma = max(radius, RADIUS_EPS) / 3.0
    r = int(radius)
    h, w = heatmap.shape
    y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
    x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
    ys = np.arange(y0, y1)[:, None] - cy
    xs = np.arange(x0, x1)[None, :] - cx
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    np.maximum(heatmap[y0:y1, x0:x1], g, out=heatmap[y0:y1, x0:x1])


def render_targets_for(
    boxes: Sequence[BoundingBox],
    n_classes: int,
    output_size: tuple[int, int],
    stride: int,
    min_iou: float = 0.7,
) -> TargetMaps:
    h, w = output_size
    heatmap = np.zeros((n_classes, h, w))
    offset = np.zeros((2, h, w))
    size = np.zeros((2, h, w))
    mask = np.zeros((h, w))
    for box in boxes:
        if not 0 <= box.class_id < n_classes:
            raise ValueError(f"class id {box.class_id} outside [0, {n_classes})")
        cx, cy = box.center
        fx, fy = cx / stride, cy / stride
        ix, iy = math.floor(fx), math.floor(fy)
        if not (0 <= ix < w and 0 <= iy < h):
            raise ValueError(f"box center ({cx}, {cy}) falls outside the {w}x{h} output map")
        bw, bh = box.width / stride, box.height / stride
        draw_gaussian(heatmap[box.class_id], ix, iy, gaussian_radius(bh, bw, min_iou))
        heatmap[box.class_id, iy, ix] = 1.0
        offset[:, iy, ix] = (fx - ix, fy - iy)
        size[:, iy, ix] = (bw, bh)
        mask[iy, ix] = 1.0
    return TargetMaps(heatmap, offset, size, mask, len(boxes))


def render_targets(boxes: Sequence[BoundingBox], cfg: ModelConfig) -> TargetMaps:
    """Targets for boxes given in model-input pixel coordinates."""
    return render_targets_for(boxes, cfg.n_classes, cfg.output_size, cfg.output_stride, cfg.gaussian_iou)
