from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import replace
from typing import Sequence

from ..core import DataError, RngState
from .manifest import SPLITS, DatasetManifest


def split_dataset(manifest: DatasetManifest, ratios: Sequence[float] = (0.6, 0.2, 0.2),
                  seed: int = 0) -> DatasetManifest:
    """Stratified train/val/test assignment; returns a new manifest with split tags."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if len(manifest.records) < len(SPLITS):
        raise DataError(f"{len(manifest.records)} samples cannot fill {len(SPLITS)} splits")
    by_label = defaultdict(list)
    for i, r in enumerate(manifest.records):
        by_label[r.label].append(i)
    total = len(manifest.records)
    target = _apportion(total, ratios)
    labels = sorted(by_label)
    quota = {lb: [r * len(by_label[lb]) for r in ratios] for lb in labels}
    counts = {lb: [math.floor(q) for q in quota[lb]] for lb in labels}
    assigned = [sum(counts[lb][s] for lb in labels) for s in range(3)]
    # hand out each class's leftover units to the splits furthest below their global target
    for lb in labels:
        floors = list(counts[lb])
        for _ in range(len(by_label[lb]) - sum(floors)):
            s = max((s for s in range(3) if counts[lb][s] == floors[s] and ratios[s] > 0),
                    key=lambda s: (target[s] - assigned[s], quota[lb][s] - floors[s], -s))
            counts[lb][s] += 1
            assigned[s] += 1
    assignment = {}
    root = RngState(seed)
    for label in labels:
        idx = sorted(by_label[label], key=lambda i: manifest.records[i].id)
        order = root.child(f"split/{label}").permutation(len(idx))
        n_train, n_val, _ = counts[label]
        for rank, j in enumerate(order):
            tag = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            assignment[idx[j]] = tag
    records = [replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)]
    extra = dict(manifest.extra, ratios=list(ratios), split_seed=seed)
    return DatasetManifest(records, manifest.root, manifest.seed, manifest.class_names, extra)


def _apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of n * ratios to integers summing to n."""
    quota = [r * n for r in ratios]
    out = [math.floor(q) for q in quota]
    for s in sorted(range(len(quota)), key=lambda s: (out[s] - quota[s], s))[:n - sum(out)]:
        out[s] += 1
    return out
