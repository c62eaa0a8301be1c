"""Matching, precision/recall and all-point interpolated AP / mAP."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import BoundingBox, Detection


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def sort_detections(dets: Sequence[Detection]) -> list[Detection]:
    """Descending score; ties keep their input order."""
    return sorted(dets, key=lambda d: -d.score)


@dataclass
class MatchResult:
    detections: list[Detection]  # descending score
    tp: list[bool]
    n_gt: dict[int, int]
    fn: dict[int, int]

    def tally(self, class_id: int | None = None) -> tuple[int, int, int]:
        """(TP, FP, FN), for one class or summed over all."""
        tp = fp = 0
        for det, flag in zip(self.detections, self.tp):
            if class_id is None or det.class_id == class_id:
                tp += flag
                fp += not flag
        fn = self.fn.get(class_id, 0) if class_id is not None else sum(self.fn.values())
        return tp, fp, fn


def match_detections(dets: Sequence[Detection], gts: Sequence[BoundingBox], iou_thresh: float = 0.5) -> MatchResult:
    """Greedy per-class matching of one image's detections to its ground truth.

    In score order, each detection takes the highest-IoU still unmatched GT of
    its class when that IoU reaches ``iou_thresh``; otherwise it is a FP.
    """
    dets = sort_detections(dets)
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, g in enumerate(gts):
        by_class[g.class_id].append(i)
    used = [False] * len(gts)
    flags = []
    for det in dets:
        best, best_iou = -1, -1.0
        for gi in by_class.get(det.class_id, ()):
            if used[gi]:
                continue
            o = iou(det.box, gts[gi])
            if o >= iou_thresh and o > best_iou:
                best, best_iou = gi, o
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    n_gt = {c: len(idx) for c, idx in by_class.items()}
    fn = {c: sum(not used[i] for i in idx) for c, idx in by_class.items()}
    return MatchResult(dets, flags, n_gt, fn)


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r


def match_precision_recall(m: MatchResult, class_id: int | None = None) -> tuple[float, float]:
    return precision_recall(*m.tally(class_id))


@dataclass
class PrCurve:
    class_id: int
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    n_gt: int


def pr_curve(scores: Sequence[float], tp_flags: Sequence[bool], n_gt: int, class_id: int = 0) -> PrCurve:
    """Sweep the score threshold over the (already matched) detections.

    Detections with equal scores enter together, so every point corresponds
    to an actual threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(tp_flags, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, flags = scores[order], flags[order]
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True)) if len(scores) else np.array([], int)
    tp, fp = tp[ends], fp[ends]
    recall = tp / n_gt if n_gt else np.zeros(len(ends))
    precision = tp / np.maximum(tp + fp, 1)
    return PrCurve(class_id, recall, precision, scores[ends], n_gt)


def average_precision(curve: PrCurve) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    if curve.n_gt == 0 or len(curve.recall) == 0:
        return 0.0
    mrec = np.concatenate([[0.0], curve.recall, [1.0]])
    mpre = np.concatenate([[0.0], curve.precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(aps: Sequence[float]) -> float:
    if len(aps) == 0:
        raise ValueError("mAP needs at least one class with ground truth")
    return float(sum(aps) / len(aps))


@dataclass
class EvalResult:
    ap: dict[int, float]
    curves: dict[int, PrCurve]
    n_gt: dict[int, int]
    mAP: float
    # (threshold, P, R) pairs; micro-averaged over classes
    at_half: tuple[float, float, float] = (0.5, 0.0, 0.0)
    at_best_f1: tuple[float, float, float] = (0.0, 0.0, 0.0)
    per_class_pr: dict[int, tuple[float, float]] = field(default_factory=dict)


def _pr_at(scores: np.ndarray, flags: np.ndarray, total_gt: int, thr: float) -> tuple[float, float]:
    keep = scores >= thr
    tp = int(flags[keep].sum())
    fp = int(keep.sum()) - tp
    return precision_recall(tp, fp, total_gt - tp)


def evaluate(
    detections: Mapping[str, Sequence[Detection]],
    ground_truth: Mapping[str, Sequence[BoundingBox]],
    n_classes: int,
    iou_thresh: float = 0.5,
) -> EvalResult:
    """Dataset-level AP per class and mAP over the classes that have ground truth.

    Images are processed in sorted id order so results do not depend on the
    order of the mappings.
    """
    scores: dict[int, list[float]] = defaultdict(list)
    flags: dict[int, list[bool]] = defaultdict(list)
    n_gt: dict[int, int] = defaultdict(int)
    all_scores, all_flags = [], []
    for image_id in sorted(set(ground_truth) | set(detections)):
        m = match_detections(detections.get(image_id, ()), ground_truth.get(image_id, ()), iou_thresh)
        for c, n in m.n_gt.items():
            n_gt[c] += n
        for det, flag in zip(m.detections, m.tp):
            scores[det.class_id].append(det.score)
            flags[det.class_id].append(flag)
            all_scores.append(det.score)
            all_flags.append(flag)

    curves, aps = {}, {}
    for c in range(n_classes):
        curves[c] = pr_curve(scores[c], flags[c], n_gt[c], c)
        if n_gt[c] > 0:
            aps[c] = average_precision(curves[c])
    result = EvalResult(aps, curves, dict(n_gt), mean_ap(list(aps.values())) if aps else 0.0)

    s = np.asarray(all_scores, dtype=np.float64)
    f = np.asarray(all_flags, dtype=bool)
    total_gt = sum(n_gt.values())
    result.at_half = (0.5, *_pr_at(s, f, total_gt, 0.5))
    best = (0.0, 0.0, 0.0)
    best_f1 = -1.0
    for thr in np.unique(s)[::-1]:
        p, r = _pr_at(s, f, total_gt, thr)
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        if f1 > best_f1:
            best_f1, best = f1, (float(thr), p, r)
    result.at_best_f1 = best
    for c in range(n_classes):
        cs = np.asarray(scores[c], dtype=np.float64)
        cf = np.asarray(flags[c], dtype=bool)
        result.per_class_pr[c] = _pr_at(cs, cf, n_gt[c], 0.5)
    return result
