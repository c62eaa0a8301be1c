"""Independent oracles and small fixtures shared by the test modules."""

from __future__ import annotations

import math

import numpy as np
import torch

from ccenternet.core import AblationFlags, BoundingBox, Detection, ModelConfig
from ccenternet.decode import decode
from ccenternet.metrics import iou
from ccenternet.targets import render_targets

# ----------------------------------------------------------------- configs


def tiny_config(flags: AblationFlags = AblationFlags(), input_size=(64, 64), **kw) -> ModelConfig:
    """Narrow network for fast unit tests."""
    opts = dict(input_size=input_size, base_width=4, fpn_channels=16, head_channels=8,
                cbam_reduction=4, ablation=flags)
    opts.update(kw)
    return ModelConfig(**opts)


# ----------------------------------------------------------------- loss oracles


def focal_loss_loop(pred, target, n, alpha=2, beta=4, clamp=1e-4):
    total = 0.0
    c_, h_, w_ = pred.shape
    for c in range(c_):
        for y in range(h_):
            for x in range(w_):
                p = min(max(float(pred[c, y, x]), clamp), 1 - clamp)
                t = float(target[c, y, x])
                if t == 1.0:
                    total += (1 - p) ** alpha * math.log(p)
                else:
                    total += (1 - t) ** beta * p ** alpha * math.log(1 - p)
    return -total / max(n, 1)


def l1_loop(pred, target, mask, n):
    total = 0.0
    _, h_, w_ = pred.shape
    for y in range(h_):
        for x in range(w_):
            if mask[y, x]:
                for k in range(2):
                    total += abs(float(pred[k, y, x]) - float(target[k, y, x]))
    return total / max(n, 1)


# ----------------------------------------------------------------- AP oracle


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def brute_force_map(dets, gts, n_classes, iou_thresh=0.5):
    """AP per class by re-matching from scratch at every distinct score threshold.

    ``dets``: {image: [(class, score, (x0, y0, x1, y1)), ...]} in emission order.
    ``gts``: {image: [(class, (x0, y0, x1, y1)), ...]}.
    """
    aps = {}
    for c in range(n_classes):
        n_gt = sum(1 for img in gts for g in gts[img] if g[0] == c)
        if n_gt == 0:
            continue
        scores = sorted({d[1] for img in dets for d in dets[img] if d[0] == c}, reverse=True)
        points = []
        for thr in scores:
            tp = fp = 0
            for img in sorted(set(dets) | set(gts)):
                kept = [d for d in dets.get(img, []) if d[0] == c and d[1] >= thr]
                kept = sorted(kept, key=lambda d: -d[1])
                g_boxes = [g[1] for g in gts.get(img, []) if g[0] == c]
                used = [False] * len(g_boxes)
                for d in kept:
                    best, best_iou = -1, -1.0
                    for gi, g in enumerate(g_boxes):
                        o = _iou(d[2], g)
                        if not used[gi] and o >= iou_thresh and o > best_iou:
                            best, best_iou = gi, o
                    if best >= 0:
                        used[best] = True
                        tp += 1
                    else:
                        fp += 1
            points.append((tp / n_gt, tp / (tp + fp)))
        ap = 0.0
        prev_r = 0.0
        for r in sorted({p[0] for p in points}):
            if r <= prev_r:
                continue
            p_env = max(p for rr, p in points if rr >= r)
            ap += (r - prev_r) * p_env
            prev_r = r
        aps[c] = ap
    return aps


# ----------------------------------------------------------------- finite differences


def fd_rel_error(fn, inputs, eps=1e-3, seed=0):
    """Worst relative error between autograd and central differences.

    ``fn`` maps float64 tensors to a tensor; it is contracted with a fixed
    random weighting so a single backward pass gives the full gradient.
    """
    inputs = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    gen = torch.Generator().manual_seed(seed)
    out = fn(*inputs)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    (out * proj).sum().backward()
    worst = 0.0
    with torch.no_grad():
        for t in inputs:
            analytic = t.grad.clone()
            numeric = torch.zeros_like(t)
            flat = t.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = (fn(*inputs) * proj).sum().item()
                flat[i] = old - eps
                down = (fn(*inputs) * proj).sum().item()
                flat[i] = old
                numeric.view(-1)[i] = (up - down) / (2 * eps)
            denom = max(analytic.norm().item(), numeric.norm().item(), 1e-8)
            worst = max(worst, (analytic - numeric).norm().item() / denom)
    return worst


# ----------------------------------------------------------------- random boxes


def random_boxes(rng: np.random.Generator, n: int, width: int, height: int, n_classes: int = 5,
                 min_size: float = 4.0) -> list[BoundingBox]:
    boxes = []
    for _ in range(n):
        w = rng.uniform(min_size, width / 2)
        h = rng.uniform(min_size, height / 2)
        x0 = rng.uniform(0, width - w)
        y0 = rng.uniform(0, height - h)
        boxes.append(BoundingBox(x0, y0, x0 + w, y0 + h, int(rng.integers(n_classes))))
    return boxes


def away_from_kinks(t: torch.Tensor, kinks, margin: float = 0.01) -> torch.Tensor:
    """Push entries lying within ``margin`` of a non-differentiable point just outside it."""
    t = t.clone()
    for k in kinks:
        near = (t - k).abs() < margin
        t[near] = k + margin * torch.where(t[near] >= k, 1.0, -1.0).to(t.dtype)
    return t


def fractional_offsets(shape, generator: torch.Generator, margin: float = 0.1) -> torch.Tensor:
    """Offsets in (-1, 1) kept ``margin`` away from integers so bilinear taps stay in one cell."""
    mag = torch.rand(shape, generator=generator, dtype=torch.float64) * (1 - 2 * margin) + margin
    sign = torch.where(torch.rand(shape, generator=generator) < 0.5, -1.0, 1.0).double()
    return mag * sign


def distinct_cell_boxes(rng: np.random.Generator, n: int, size: int = 256, stride: int = 4) -> list[BoundingBox]:
    """Random boxes whose centres fall in distinct output cells."""
    boxes, cells = [], set()
    while len(boxes) < n:
        b = random_boxes(rng, 1, size, size)[0]
        cell = (int(b.center[0] // stride), int(b.center[1] // stride))
        if cell not in cells:
            cells.add(cell)
            boxes.append(b)
    return boxes


def render_decode_recovers(boxes, cfg: ModelConfig, threshold: float | None = None) -> bool:
    """True when decoding the rendered targets returns each box once, with IoU 1 and the right class."""
    t = render_targets(boxes, cfg)
    dets = decode(t.heatmap, t.offset, t.size, cfg, threshold=threshold)
    if len(dets) != len(boxes):
        return False
    return all(len([d for d in dets if d.class_id == b.class_id and iou(d.box, b) > 1 - 1e-9]) == 1 for b in boxes)


def random_eval_case(rng: np.random.Generator, n_images: int = 4, n_classes: int = 3, tie_scores: bool = False):
    """Jittered true positives plus random false positives; returns dets, gts and their raw tuple forms."""
    dets, gts, dets_raw, gts_raw = {}, {}, {}, {}
    for i in range(n_images):
        img = f"im{i}"
        g = random_boxes(rng, int(rng.integers(0, 4)), 60, 60, n_classes)
        gts[img] = g
        gts_raw[img] = [(b.class_id, b.as_tuple()) for b in g]
        d = []
        for b in g:
            if rng.uniform() < 0.8:
                j = rng.normal(0, 3, size=4)
                x0, y0 = b.x_min + j[0], b.y_min + j[1]
                box = BoundingBox(x0, y0, max(b.x_max + j[2], x0 + 1), max(b.y_max + j[3], y0 + 1), b.class_id)
                d.append(Detection(b.class_id, float(rng.uniform()), box))
        for b in random_boxes(rng, int(rng.integers(0, 4)), 60, 60, n_classes):
            d.append(Detection(b.class_id, float(rng.uniform()), b))
        if tie_scores:
            d = [Detection(x.class_id, round(x.score, 1), x.box) for x in d]
        dets[img] = d
        dets_raw[img] = [(x.class_id, x.score, x.box.as_tuple()) for x in d]
    return dets, gts, dets_raw, gts_raw
