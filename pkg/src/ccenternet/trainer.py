"""Training protocol, checkpoints, evaluation and the ablation runner."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch
from torch.nn.utils import clip_grad_norm_

from .core import (CLASS_NAMES, REPORT_CLASS_ORDER, AblationFlags, BoundingBox, ConfigError,
                   DataError, Detection, DivergenceError, ModelConfig, seed_all, validate_config)
from .data.dataset import DEFAULT_AUGMENT, DetectionDataset, collate, prepare
from .data.manifest import DatasetManifest
from .decode import decode
from .losses import detection_loss
from .metrics import EvalResult, evaluate
from .model import CCenterNet, build_model, count_parameters

log = logging.getLogger(__name__)

WEIGHT_DECAY_MODES = ("off", "lr_multiplier", "l2")


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 300
    freeze_epochs: int = 50
    batch_frozen: int = 32
    batch_thawed: int = 16
    lr_frozen: float = 1e-3
    lr_thawed: float = 1.25e-4
    lr_min_ratio: float = 0.01
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # How the reported "weight decay rate 0.5" is applied: not at all, as a
    # multiplier on the thawed-phase lr, or as an L2 coefficient.
    decay_mode: str = "off"
    decay_factor: float = 0.5
    grad_clip: float = 35.0
    augment: tuple[str, ...] = DEFAULT_AUGMENT
    eval_batch: int = 16
    checkpoint_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if not 0 <= self.freeze_epochs < self.total_epochs:
            raise ConfigError("freeze_epochs must lie in [0, total_epochs)")
        if self.batch_frozen < 1 or self.batch_thawed < 1 or self.eval_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.lr_frozen <= 0 or self.lr_thawed <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0 <= self.lr_min_ratio < 1:
            raise ConfigError("lr_min_ratio must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.decay_mode not in WEIGHT_DECAY_MODES:
            raise ConfigError(f"decay_mode must be one of {WEIGHT_DECAY_MODES}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["augment"] = list(self.augment)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        values = dict(data)
        if "augment" in values:
            aug = values["augment"]
            values["augment"] = tuple(aug.split(",")) if isinstance(aug, str) else tuple(aug or ())
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


def phase_of(epoch: int, cfg: TrainConfig) -> str:
    return "frozen" if epoch < cfg.freeze_epochs else "thawed"


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing restarted at the thaw, floor = lr_phase * lr_min_ratio."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.freeze_epochs:
        base, t, span = cfg.lr_frozen, epoch, cfg.freeze_epochs
    else:
        base = cfg.lr_thawed
        if cfg.decay_mode == "lr_multiplier":
            base *= cfg.decay_factor
        t, span = epoch - cfg.freeze_epochs, cfg.total_epochs - cfg.freeze_epochs
    floor = base * cfg.lr_min_ratio
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * t / span))


def batch_size_at(epoch: int, cfg: TrainConfig) -> int:
    return cfg.batch_frozen if epoch < cfg.freeze_epochs else cfg.batch_thawed


def freeze_backbone(model: CCenterNet, frozen: bool) -> None:
    model.freeze_backbone(frozen)


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    wd = cfg.decay_factor if cfg.decay_mode == "l2" else cfg.weight_decay
    params = [p for _, p in model.named_parameters()]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr_frozen, weight_decay=wd)
    return torch.optim.SGD(params, lr=cfg.lr_frozen, momentum=cfg.momentum, weight_decay=wd)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CCNTCKPT"
VERSION = 1


def config_fingerprint(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: dict[str, Any]
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    best: bool = False
    metrics: dict[str, Any] = field(default_factory=dict)
    optimizer: dict[str, Any] = field(default_factory=dict)
    fingerprint: str = ""

    def build_model(self) -> CCenterNet:
        model = build_model(self.model_config)
        state = model.state_dict()
        loaded = {}
        for key, ref in state.items():
            blob = self.tensors.get(f"model/{key}")
            if blob is None:
                raise DataError(f"checkpoint is missing tensor {key!r}")
            if tuple(blob.shape) != tuple(ref.shape):
                raise DataError(f"shape mismatch for {key}: {blob.shape} vs {tuple(ref.shape)}")
            loaded[key] = torch.from_numpy(blob.copy()).to(ref.dtype)
        model.load_state_dict(loaded)
        model.eval()
        return model

    def restore_optimizer(self, model: torch.nn.Module, opt: torch.optim.Optimizer) -> None:
        state = opt.state_dict()
        names = [n for n, _ in model.named_parameters()]
        steps = self.optimizer.get("steps", {})
        new_state = {}
        for i, name in enumerate(names):
            entry = {}
            for slot in ("exp_avg", "exp_avg_sq", "momentum_buffer"):
                blob = self.tensors.get(f"optim/{name}/{slot}")
                if blob is not None:
                    entry[slot] = torch.from_numpy(blob.copy())
            if name in steps:
                entry["step"] = torch.tensor(float(steps[name]))
            if entry:
                new_state[i] = entry
        state["state"] = new_state
        opt.load_state_dict(state)


def save_checkpoint(path, model: torch.nn.Module, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None,
                    optimizer: torch.optim.Optimizer | None = None, epoch: int = 0, best: bool = False,
                    metrics: Mapping[str, Any] | None = None) -> Path:
    """Single-file archive: magic, version, JSON header, then named float32 blobs."""
    blobs: list[tuple[str, np.ndarray]] = []
    for key, t in model.state_dict().items():
        blobs.append((f"model/{key}", t.detach().cpu().to(torch.float32).numpy()))
    opt_meta: dict[str, Any] = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        steps = {}
        for p, st in optimizer.state.items():
            name = names[id(p)]
            for slot, value in st.items():
                if slot == "step":
                    steps[name] = float(value)
                elif isinstance(value, torch.Tensor):
                    blobs.append((f"optim/{name}/{slot}", value.detach().cpu().to(torch.float32).numpy()))
        opt_meta = {"type": type(optimizer).__name__, "steps": steps}
    header = {
        "format": "ccenternet-checkpoint",
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else {},
        "fingerprint": config_fingerprint(model_cfg),
        "epoch": epoch,
        "best": best,
        "metrics": dict(metrics or {}),
        "optimizer": opt_meta,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(head)))
        f.write(head)
        f.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            raw = name.encode()
            f.write(struct.pack("<HB", len(raw), arr.ndim))
            f.write(raw)
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if data[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    version, head_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(data[pos:pos + head_len])
    pos += head_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", data, pos)
        pos += 3
        name = data[pos:pos + name_len].decode()
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    cfg = validate_config(header["model_config"])
    if config_fingerprint(cfg) != header["fingerprint"]:
        raise DataError(f"{path}: config fingerprint mismatch")
    return Checkpoint(cfg, header["train_config"], tensors, header["epoch"], header["best"],
                      header["metrics"], header["optimizer"], header["fingerprint"])


# ---------------------------------------------------------------- evaluation

def iterate_batches(dataset: DetectionDataset, order: Sequence[int], batch_size: int):
    for start in range(0, len(order), batch_size):
        yield collate([dataset[int(i)] for i in order[start:start + batch_size]])


@torch.no_grad()
def evaluate_loss(model: CCenterNet, dataset: DetectionDataset, batch_size: int = 16) -> dict[str, float]:
    model.eval()
    totals = {"L_cls": 0.0, "L_off": 0.0, "L_reg": 0.0, "L_det": 0.0}
    count = 0
    cfg = model.cfg
    for batch in iterate_batches(dataset, range(len(dataset)), batch_size):
        parts = detection_loss(model(batch["image"]), batch, cfg.lambda_reg, cfg.lambda_off).as_floats()
        k = batch["image"].shape[0]
        for key in totals:
            totals[key] += parts[key] * k
        count += k
    return {k: v / max(count, 1) for k, v in totals.items()}


@torch.no_grad()
def predict_dataset(model: CCenterNet, dataset: DetectionDataset, threshold: float | None = None,
                    batch_size: int = 16) -> tuple[dict[str, list[Detection]], dict[str, list[BoundingBox]]]:
    """Detections and ground truth per image id, both in original image pixels."""
    model.eval()
    cfg = model.cfg
    dets: dict[str, list[Detection]] = {}
    gts: dict[str, list[BoundingBox]] = {}
    for start in range(0, len(dataset), batch_size):
        samples = [dataset.sample(i) for i in range(start, min(start + batch_size, len(dataset)))]
        prepared = [prepare(s, cfg) for s in samples]
        out = model(torch.stack([p[0] for p in prepared]))
        for j, (s, (_, _, lb)) in enumerate(zip(samples, prepared)):
            raw = decode(out.heatmap[j], out.offset[j], out.size[j], cfg, threshold=threshold)
            dets[s.id] = lb.inverse_detections(raw, s.width, s.height)
            gts[s.id] = list(s.boxes)
    return dets, gts


def metrics_report(result: EvalResult, class_names: Sequence[str] = CLASS_NAMES) -> dict[str, Any]:
    """Per-class AP in the report column order, mAP and P/R at both thresholds."""
    ap = {}
    for name in REPORT_CLASS_ORDER:
        if name in class_names:
            c = class_names.index(name)
            ap[name] = result.ap.get(c)
    for c, name in enumerate(class_names):
        if name not in ap:
            ap[name] = result.ap.get(c)
    thr, p, r = result.at_half
    bthr, bp, br = result.at_best_f1
    return {
        "AP": ap,
        "mAP": result.mAP,
        "P@0.5": p,
        "R@0.5": r,
        "best_f1_threshold": bthr,
        "P@best_f1": bp,
        "R@best_f1": br,
        "n_gt": {class_names[c]: n for c, n in sorted(result.n_gt.items())},
    }


def format_report(report: Mapping[str, Any]) -> str:
    names = list(report["AP"])
    head = "\t".join(names + ["mAP"])
    cells = ["-" if report["AP"][n] is None else f"{100 * report['AP'][n]:.2f}" for n in names]
    lines = [head, "\t".join(cells + [f"{100 * report['mAP']:.2f}"]),
             f"P@0.5={100 * report['P@0.5']:.2f} R@0.5={100 * report['R@0.5']:.2f} "
             f"P@maxF1={100 * report['P@best_f1']:.2f} R@maxF1={100 * report['R@best_f1']:.2f} "
             f"(threshold {report['best_f1_threshold']:.3f})"]
    return "\n".join(lines)


def evaluate_model(model: CCenterNet, dataset: DetectionDataset, iou_thresh: float = 0.5) -> EvalResult:
    dets, gts = predict_dataset(model, dataset, threshold=0.0)
    return evaluate(dets, gts, model.cfg.n_classes, iou_thresh)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: CCenterNet
    history: list[dict[str, float]]
    checkpoint: Path | None
    val_metrics: dict[str, float]


def _datasets(manifest: DatasetManifest, model_cfg: ModelConfig, train_cfg: TrainConfig):
    train_records = manifest.subset("train")
    if not train_records:
        raise DataError("manifest has no train split")
    kinds = train_cfg.augment if model_cfg.ablation.augmentation else ()
    train_ds = DetectionDataset(manifest, train_records, model_cfg, kinds, train_cfg.seed)
    val_records = manifest.subset("val")
    val_ds = DetectionDataset(manifest, val_records, model_cfg) if val_records else None
    return train_ds, val_ds


LOSS_CURVE_FIELDS = ("epoch", "lr", "L_cls", "L_off", "L_reg", "L_det", "val_L_det")


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, manifest: DatasetManifest,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    model_cfg = validate_config(model_cfg)
    rng = seed_all(train_cfg.seed)
    torch.manual_seed(rng.child_seed("init"))
    model = build_model(model_cfg)
    optimizer = build_optimizer(model, train_cfg)
    train_ds, val_ds = _datasets(manifest, model_cfg, train_cfg)
    out_dir = Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else None
    curve_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        curve_path = out_dir / "loss_curve.csv"
        with open(curve_path, "w", newline="") as f:
            csv.writer(f).writerow(LOSS_CURVE_FIELDS)

    history = []
    best_val = math.inf
    ckpt_path = None
    val_parts: dict[str, float] = {}
    for epoch in range(train_cfg.total_epochs):
        frozen = epoch < train_cfg.freeze_epochs
        model.train()
        freeze_backbone(model, frozen)
        lr = lr_at(epoch, train_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        train_ds.set_epoch(epoch)
        order = rng.child(f"shuffle/{epoch}").permutation(len(train_ds))
        sums = {"L_cls": 0.0, "L_off": 0.0, "L_reg": 0.0, "L_det": 0.0}
        seen = 0
        t0 = time.time()
        for batch in iterate_batches(train_ds, order, batch_size_at(epoch, train_cfg)):
            out = model(batch["image"])
            parts = detection_loss(out, batch, model_cfg.lambda_reg, model_cfg.lambda_off)
            if not torch.isfinite(parts.det):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            parts.det.backward()
            if train_cfg.grad_clip > 0:
                clip_grad_norm_([p for p in model.parameters() if p.grad is not None], train_cfg.grad_clip)
            optimizer.step()
            k = batch["image"].shape[0]
            for key, v in parts.as_floats().items():
                sums[key] += v * k
            seen += k
        row = {"epoch": epoch + 1, "lr": lr, **{k: v / seen for k, v in sums.items()}}
        if val_ds is not None and len(val_ds):
            val_parts = evaluate_loss(model, val_ds, train_cfg.eval_batch)
            row["val_L_det"] = val_parts["L_det"]
        else:
            row["val_L_det"] = float("nan")
        history.append(row)
        log.info("epoch %d/%d lr=%.2e L_det=%.4f val=%.4f (%.1fs)", epoch + 1, train_cfg.total_epochs,
                 lr, row["L_det"], row["val_L_det"], time.time() - t0)
        if curve_path is not None:
            with open(curve_path, "a", newline="") as f:
                csv.writer(f).writerow([row[k] for k in LOSS_CURVE_FIELDS])
            is_best = row["val_L_det"] < best_val
            metrics = {"val_loss": val_parts, "train_loss": {k: row[k] for k in sums}}
            ckpt_path = save_checkpoint(out_dir / "last.ckpt", model, model_cfg, train_cfg, optimizer,
                                        epoch + 1, is_best, metrics)
            if is_best:
                best_val = row["val_L_det"]
                save_checkpoint(out_dir / "best.ckpt", model, model_cfg, train_cfg, optimizer,
                                epoch + 1, True, metrics)
        if on_epoch is not None:
            on_epoch(row)
    model.freeze_backbone(False)
    model.eval()
    return TrainResult(model, history, ckpt_path, val_parts)


def flags_label(flags: AblationFlags) -> dict[str, str]:
    mark = {True: "Y", False: "-"}
    return {"Data Augmentation": mark[flags.augmentation], "CBAM": mark[flags.cbam],
            "FPN": mark[flags.fpn], "DCN": mark[flags.dcn], "ACON": mark[flags.acon]}


def run_ablation(rows: Sequence[AblationFlags], model_cfg: ModelConfig, train_cfg: TrainConfig,
                 manifest: DatasetManifest, eval_split: str = "test") -> list[dict[str, Any]]:
    """Train and evaluate one model per flag row under identical seeds and data."""
    eval_records = manifest.subset(eval_split)
    if not eval_records:
        raise DataError(f"manifest has no {eval_split!r} split")
    results = []
    for i, flags in enumerate(rows, start=1):
        cfg = dataclasses.replace(model_cfg, ablation=flags)
        row_train = train_cfg
        if train_cfg.checkpoint_dir:
            row_train = dataclasses.replace(train_cfg, checkpoint_dir=str(Path(train_cfg.checkpoint_dir) / f"row{i}"))
        res = train(row_train, cfg, manifest)
        ev = evaluate_model(res.model, DetectionDataset(manifest, eval_records, res.model.cfg))
        rep = metrics_report(ev, cfg.class_names)
        results.append({
            "experiment": i,
            **flags_label(flags),
            "P": rep["P@0.5"],
            "R": rep["R@0.5"],
            "mAP": rep["mAP"],
            "params": count_parameters(res.model),
            "AP": rep["AP"],
            "final_train_loss": res.history[-1]["L_det"],
        })
    return results


def format_ablation_table(results: Sequence[Mapping[str, Any]]) -> str:
    cols = ["Experiment", "Data Augmentation", "CBAM", "FPN", "DCN", "ACON", "P /%", "R /%", "mAP /%", "params"]
    lines = ["\t".join(cols)]
    for r in results:
        lines.append("\t".join([
            str(r["experiment"]), r["Data Augmentation"], r["CBAM"], r["FPN"], r["DCN"], r["ACON"],
            f"{100 * r['P']:.2f}", f"{100 * r['R']:.2f}", f"{100 * r['mAP']:.2f}", str(r["params"]),
        ]))
    return "\n".join(lines)
