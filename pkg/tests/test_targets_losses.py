import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ccenternet.core import BoundingBox, ModelConfig
from ccenternet.losses import (detection_loss, focal_loss, masked_l1, offset_loss, size_loss, total_loss)
from ccenternet.model import HeadOutputs
from ccenternet.targets import gaussian_radius, render_targets, render_targets_for

from helpers import focal_loss_loop, l1_loop


def _min_iou_under_shift(h, w, r):
    """Worst IoU when every box edge moves by +-r independently."""
    worst = 1.0
    for dx0, dy0, dx1, dy1 in itertools.product((-r, r), repeat=4):
        a = (0.0, 0.0, w, h)
        b = (dx0, dy0, w + dx1, h + dy1)
        iw = min(a[2], b[2]) - max(a[0], b[0])
        ih = min(a[3], b[3]) - max(a[1], b[1])
        inter = max(iw, 0) * max(ih, 0)
        union = w * h + (b[2] - b[0]) * (b[3] - b[1]) - inter
        worst = min(worst, inter / union)
    return worst


# ---------------------------------------------------------------- radius

def test_radius_10x10():
    r = gaussian_radius(10, 10, 0.7)
    assert r == pytest.approx(5 - math.sqrt(70) / 2, abs=1e-12)  # shrink case binds
    assert _min_iou_under_shift(10, 10, math.floor(r)) >= 0.7
    assert _min_iou_under_shift(10, 10, r) >= 0.7 - 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 200.0), st.floats(1.0, 200.0), st.floats(0.3, 0.95))
def test_radius_is_tight(h, w, iou):
    r = gaussian_radius(h, w, iou)
    assert _min_iou_under_shift(w, h, r) >= iou - 1e-9
    assert _min_iou_under_shift(w, h, r * 1.01 + 1e-6) < iou


def test_radius_degenerate_and_monotone():
    assert gaussian_radius(1e-9, 1e-9) < 1e-8
    assert gaussian_radius(20, 20) > gaussian_radius(10, 10)
    with pytest.raises(ValueError):
        gaussian_radius(0, 5)


# ---------------------------------------------------------------- targets

CFG = ModelConfig(input_size=(256, 256))


def test_render_empty():
    t = render_targets([], CFG)
    assert t.n == 0
    assert not t.heatmap.any() and not t.mask.any()


def test_render_grid_aligned():
    box = BoundingBox(90, 50, 110, 70, 2)  # centre (100, 60)
    t = render_targets([box], CFG)
    assert t.heatmap[2, 15, 25] == 1.0
    assert tuple(t.offset[:, 15, 25]) == (0.0, 0.0)
    assert tuple(t.size[:, 15, 25]) == (5.0, 5.0)
    assert t.mask.sum() == 1 and t.mask[15, 25] == 1


def test_render_subpixel_offset():
    box = BoundingBox(91.2, 50.8, 111.2, 70.8, 0)  # centre (101.2, 60.8)
    t = render_targets([box], CFG)
    assert t.heatmap[0, 15, 25] == 1.0
    np.testing.assert_allclose(t.offset[:, 15, 25], (0.3, 0.2), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 200), st.floats(0, 200), st.floats(4, 56), st.floats(4, 56),
                          st.integers(0, 4)), max_size=6))
def test_render_properties(specs):
    boxes = [BoundingBox(x, y, x + w, y + h, c) for x, y, w, h, c in specs]
    t = render_targets(boxes, CFG)
    assert t.n == len(boxes)
    assert t.heatmap.min() >= 0 and t.heatmap.max() <= 1
    assert t.mask.sum() <= len(boxes)
    for b in boxes:
        cx, cy = b.center
        assert t.heatmap[b.class_id, int(cy // 4), int(cx // 4)] == 1.0
    assert np.all((t.offset >= 0) & (t.offset < 1))


def test_render_rejects_center_off_map():
    with pytest.raises(ValueError):
        render_targets_for([BoundingBox(300, 10, 310, 20, 0)], 5, (64, 64), 4)
    with pytest.raises(ValueError):
        render_targets_for([BoundingBox(1, 1, 10, 10, 7)], 5, (64, 64), 4)


# ---------------------------------------------------------------- focal loss

def _t(*v):
    return torch.tensor(v, dtype=torch.float64).view(1, 1, len(v))


def test_focal_hand_values():
    assert focal_loss(_t(0.5), _t(1.0), 1).item() == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert focal_loss(_t(0.5), _t(1.0), 1).item() == pytest.approx(0.1733, abs=1e-4)
    assert focal_loss(_t(0.5), _t(0.5), 1).item() == pytest.approx(0.0625 * 0.25 * math.log(2), abs=1e-12)
    assert focal_loss(_t(0.5), _t(0.5), 1).item() == pytest.approx(0.01083, abs=1e-5)


def test_focal_perfect_prediction_tends_to_zero():
    target = torch.tensor([[[1.0, 0.0, 0.3]]], dtype=torch.float64)
    losses = []
    for eps in (1e-1, 1e-2, 1e-3):
        pred = torch.where(target == 1, 1 - eps, eps * torch.ones_like(target))
        losses.append(focal_loss(pred, target, 1).item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-4


def test_focal_zero_objects_guarded():
    pred = torch.full((1, 4, 4), 0.2, dtype=torch.float64)
    target = torch.zeros_like(pred)
    assert focal_loss(pred, target, 0).item() == pytest.approx(focal_loss(pred, target, 1).item())


@pytest.mark.parametrize("seed", range(10))
def test_losses_match_loop_oracles(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0, 1, size=(5, 8, 8))
    target = rng.uniform(0, 1, size=(5, 8, 8)) ** 3
    target[rng.uniform(size=target.shape) < 0.05] = 1.0
    n = int(rng.integers(0, 6))
    got = focal_loss(torch.from_numpy(pred), torch.from_numpy(target), n).item()
    assert got == pytest.approx(focal_loss_loop(pred, target, n), abs=1e-9)
    o_pred, o_tgt = rng.normal(size=(2, 2, 8, 8))
    mask = (rng.uniform(size=(8, 8)) < 0.1).astype(float)
    got = offset_loss(torch.from_numpy(o_pred), torch.from_numpy(o_tgt), torch.from_numpy(mask), n).item()
    assert got == pytest.approx(l1_loop(o_pred, o_tgt, mask, n), abs=1e-9)


# ---------------------------------------------------------------- L1 terms

def _maps(*cells):
    """(2, 4, 4) maps with the given (y, x, (a, b)) cell values."""
    m = torch.zeros(2, 4, 4, dtype=torch.float64)
    for y, x, v in cells:
        m[:, y, x] = torch.tensor(v, dtype=torch.float64)
    return m


def test_offset_loss_hand():
    mask = torch.zeros(4, 4, dtype=torch.float64)
    mask[1, 2] = 1
    pred, tgt = _maps((1, 2, (0.5, 0.5))), _maps((1, 2, (0.3, 0.2)))
    assert offset_loss(pred, tgt, mask, 1).item() == pytest.approx(0.5, abs=1e-12)
    assert offset_loss(tgt, tgt, mask, 1).item() == 0.0
    assert offset_loss(pred, tgt, torch.zeros_like(mask), 0).item() == 0.0


def test_size_loss_hand():
    mask = torch.zeros(4, 4, dtype=torch.float64)
    mask[0, 0] = 1
    assert size_loss(_maps((0, 0, (10, 4))), _maps((0, 0, (8, 5))), mask, 1).item() == pytest.approx(3.0)
    mask[3, 3] = 1
    pred = _maps((0, 0, (1, 0)), (3, 3, (2, 1)))
    tgt = _maps((0, 0, (0, 0)), (3, 3, (0, 0)))
    assert size_loss(pred, tgt, mask, 2).item() == pytest.approx(2.0)
    assert size_loss(tgt, tgt, mask, 2).item() == 0.0


def test_masked_l1_ignores_unmasked_cells():
    pred = torch.randn(2, 4, 4, dtype=torch.float64)
    assert masked_l1(pred, pred + 5, torch.zeros(4, 4, dtype=torch.float64), 3).item() == 0.0


# ---------------------------------------------------------------- total

def test_total_loss_weighting():
    assert total_loss(1.0, 3.0, 2.0).det == pytest.approx(4.2, abs=1e-15)
    assert total_loss(0.0, 0.0, 0.0).det == 0.0
    assert total_loss(1.0, 3.0, 2.0, lambda_reg=1.0, lambda_off=1.0).det == 6.0


def test_detection_loss_batches_normalise_by_total_objects():
    torch.manual_seed(0)
    cfg = ModelConfig(input_size=(64, 64))
    b1 = [BoundingBox(10, 10, 30, 30, 0)]
    b2 = [BoundingBox(5, 5, 20, 25, 1), BoundingBox(30, 30, 60, 50, 3)]
    ts = [render_targets(b, cfg) for b in (b1, b2)]
    batch = {k: torch.from_numpy(np.stack([getattr(t, k) for t in ts])) for k in ("heatmap", "offset", "size", "mask")}
    batch["n"] = torch.tensor([float(t.n) for t in ts], dtype=torch.float64)
    out = HeadOutputs(torch.rand(2, 5, 16, 16, dtype=torch.float64), torch.rand(2, 2, 16, 16, dtype=torch.float64),
                      5 * torch.rand(2, 2, 16, 16, dtype=torch.float64))
    parts = detection_loss(out, batch)
    cls = sum(focal_loss_loop(out.heatmap[i].numpy(), ts[i].heatmap, 1) for i in range(2)) / 3
    reg = sum(l1_loop(out.size[i].numpy(), ts[i].size, ts[i].mask, 1) for i in range(2)) / 3
    off = sum(l1_loop(out.offset[i].numpy(), ts[i].offset, ts[i].mask, 1) for i in range(2)) / 3
    assert parts.cls.item() == pytest.approx(cls, abs=1e-9)
    assert parts.reg.item() == pytest.approx(reg, abs=1e-9)
    assert parts.off.item() == pytest.approx(off, abs=1e-9)
    assert parts.det.item() == pytest.approx(cls + 0.1 * reg + off, abs=1e-9)
    assert set(parts.as_floats()) == {"L_cls", "L_off", "L_reg", "L_det"}
