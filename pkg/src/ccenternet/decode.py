"""Turning head outputs into detections: 3x3 peak picking, no NMS."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import BoundingBox, Detection, ModelConfig


def _numpy(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def local_max_mask(heatmap: np.ndarray) -> np.ndarray:
    """True where a value equals the max of its 3x3 neighbourhood (per class)."""
    padded = np.pad(heatmap, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    window_max = sliding_window_view(padded, (3, 3), axis=(1, 2)).max(axis=(-1, -2))
    return heatmap == window_max


def extract_peaks(heatmap, k: int) -> list[tuple[int, int, int, float]]:
    """Top-k local maxima as ``(class, y, x, score)``.

    Equal scores keep row-major (class, y, x) order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    heat = _numpy(heatmap)
    keep = local_max_mask(heat).ravel()
    flat = heat.ravel()
    idx = np.flatnonzero(keep)
    order = idx[np.argsort(-flat[idx], kind="stable")][:k]
    c, y, x = np.unravel_index(order, heat.shape)
    return [(int(ci), int(yi), int(xi), float(flat[o])) for ci, yi, xi, o in zip(c, y, x, order)]


def decode(heatmap, offset, size, cfg: ModelConfig, image_size: tuple[int, int] | None = None,
           threshold: float | None = None) -> list[Detection]:
    """Detections for one image in model-input pixels.

    ``image_size`` is ``(H, W)`` used for clipping and defaults to the model input.
    """
    stride = cfg.output_stride
    thr = cfg.confidence_threshold if threshold is None else threshold
    h_img, w_img = image_size or cfg.input_size
    off = _numpy(offset)
    sz = _numpy(size)
    dets = []
    for c, y, x, score in extract_peaks(heatmap, cfg.top_k):
        if score < thr:
            continue
        cx = (x + off[0, y, x]) * stride
        cy = (y + off[1, y, x]) * stride
        bw = sz[0, y, x] * stride
        bh = sz[1, y, x] * stride
        x0, x1 = max(cx - bw / 2, 0.0), min(cx + bw / 2, float(w_img))
        y0, y1 = max(cy - bh / 2, 0.0), min(cy + bh / 2, float(h_img))
        if x1 <= x0 or y1 <= y0:
            continue
        dets.append(Detection(c, min(max(score, 0.0), 1.0), BoundingBox(x0, y0, x1, y1, c)))
    return dets


def decode_outputs(outputs, cfg: ModelConfig, threshold: float | None = None) -> list[list[Detection]]:
    """Decode a batched ``HeadOutputs``."""
    return [
        decode(outputs.heatmap[i], outputs.offset[i], outputs.size[i], cfg, threshold=threshold)
        for i in range(outputs.heatmap.shape[0])
    ]
