"""Letterboxing and the torch dataset feeding the trainer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset

from ..core import BoundingBox, Detection, ImageSample, ModelConfig, RngState
from ..targets import render_targets
from .augment import AugmentConfig, augment
from .manifest import DatasetManifest, Record
from .voc import load_sample

DEFAULT_AUGMENT = ("hflip", "vflip", "crop", "brightness", "noise", "defect_paste")


@dataclass(frozen=True)
class Letterbox:
    """Maps original image pixels into the padded model input."""

    scale_x: float
    scale_y: float
    pad_x: int
    pad_y: int

    def forward(self, b: BoundingBox) -> BoundingBox:
        return BoundingBox(b.x_min * self.scale_x + self.pad_x, b.y_min * self.scale_y + self.pad_y,
                           b.x_max * self.scale_x + self.pad_x, b.y_max * self.scale_y + self.pad_y, b.class_id)

    def inverse(self, b: BoundingBox) -> BoundingBox:
        return BoundingBox((b.x_min - self.pad_x) / self.scale_x, (b.y_min - self.pad_y) / self.scale_y,
                           (b.x_max - self.pad_x) / self.scale_x, (b.y_max - self.pad_y) / self.scale_y, b.class_id)

    def inverse_detections(self, dets: Iterable[Detection], width: int, height: int) -> list[Detection]:
        out = []
        for d in dets:
            try:
                box = self.inverse(d.box).clip(width, height)
            except ValueError:
                box = None
            if box is not None:
                out.append(Detection(d.class_id, d.score, box))
        return out


def letterbox(pixels: np.ndarray, input_size: tuple[int, int], fill: float = 0.5) -> tuple[torch.Tensor, Letterbox]:
    """Aspect-preserving resize into ``input_size`` (H, W), centred, padded with ``fill``."""
    _, h, w = pixels.shape
    in_h, in_w = input_size
    s = min(in_h / h, in_w / w)
    new_h, new_w = max(1, int(round(h * s))), max(1, int(round(w * s)))
    t = torch.as_tensor(np.ascontiguousarray(pixels), dtype=torch.float32).unsqueeze(0)
    if (new_h, new_w) != (h, w):
        t = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False, antialias=True)
    pad_y, pad_x = (in_h - new_h) // 2, (in_w - new_w) // 2
    out = torch.full((3, in_h, in_w), float(fill))
    out[:, pad_y:pad_y + new_h, pad_x:pad_x + new_w] = t[0].clamp(0, 1)
    return out, Letterbox(new_w / w, new_h / h, pad_x, pad_y)


def prepare(sample: ImageSample, cfg: ModelConfig) -> tuple[torch.Tensor, list[BoundingBox], Letterbox]:
    image, lb = letterbox(sample.pixels, cfg.input_size, cfg.letterbox_fill)
    in_h, in_w = cfg.input_size
    boxes = []
    for b in sample.boxes:
        clipped = lb.forward(b).clip(in_w, in_h)
        if clipped is not None:
            boxes.append(clipped)
    return image, boxes, lb


def targets_to_tensors(boxes: Sequence[BoundingBox], cfg: ModelConfig) -> dict[str, torch.Tensor]:
    t = render_targets(boxes, cfg)
    return {
        "heatmap": torch.as_tensor(t.heatmap, dtype=torch.float32),
        "offset": torch.as_tensor(t.offset, dtype=torch.float32),
        "size": torch.as_tensor(t.size, dtype=torch.float32),
        "mask": torch.as_tensor(t.mask, dtype=torch.float32),
        "n": torch.tensor(t.n, dtype=torch.float32),
    }


class DetectionDataset(Dataset):
    """Samples of one split, letterboxed to the model input with rendered targets.

    Images are decoded once and cached. Augmentation draws from a stream
    keyed by (seed, epoch, sample id), so batches do not depend on worker
    count or iteration order.
    """

    def __init__(self, manifest: DatasetManifest, records: Sequence[Record], cfg: ModelConfig,
                 augment_kinds: Iterable[str] = (), seed: int = 0,
                 augment_cfg: AugmentConfig = AugmentConfig()):
        self.manifest = manifest
        self.records = list(records)
        self.cfg = cfg
        self.kinds = frozenset(augment_kinds)
        self.augment_cfg = augment_cfg
        self.rng = RngState(seed)
        self.epoch = 0
        self._cache: dict[int, ImageSample] = {}

    def __len__(self):
        return len(self.records)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def sample(self, i: int) -> ImageSample:
        if i not in self._cache:
            r = self.records[i]
            s = load_sample(self.manifest.image_path(r), self.manifest.xml_path(r),
                            self.manifest.class_names, r.id)
            pixels = np.round(s.pixels * 255).astype(np.uint8)
            self._cache[i] = ImageSample(pixels, s.boxes, s.id)
        cached = self._cache[i]
        return ImageSample(cached.pixels.astype(np.float32) / 255.0, cached.boxes, cached.id)

    def augmented(self, i: int) -> ImageSample:
        s = self.sample(i)
        if not self.kinds:
            return s
        rng = self.rng.child(f"augment/{self.epoch}/{s.id}")
        donor = None
        if "defect_paste" in self.kinds and len(self.records) > 1 and rng.random() < 0.3:
            donor = self.sample(int(rng.integers(len(self.records))))
        return augment(s, self.kinds - ({"defect_paste"} if donor is None else set()), rng, self.augment_cfg, donor)

    def __getitem__(self, i: int):
        s = self.augmented(i)
        image, boxes, _ = prepare(s, self.cfg)
        item = targets_to_tensors(boxes, self.cfg)
        item["image"] = image
        item["index"] = torch.tensor(i)
        return item


def collate(items: list[dict]) -> dict[str, torch.Tensor]:
    return {k: torch.stack([it[k] for it in items]) for k in items[0]}
