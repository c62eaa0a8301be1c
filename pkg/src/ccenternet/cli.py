"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import statistics
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .core import (CCenterNetError, ConfigError, DataError, Detection, BoundingBox, ImageSample,
                   MODEL_KEYS, load_config_text, parse_override, validate_config)
from .data.dataset import DetectionDataset, prepare
from .data.manifest import DatasetManifest
from .data.split import split_dataset
from .data.synth import SynthConfig, synth_generate
from .data.voc import load_image, parse_voc_xml
from .decode import decode
from .metrics import evaluate
from .trainer import (TRAIN_KEYS, TrainConfig, format_ablation_table, format_report, load_checkpoint,
                      metrics_report, predict_dataset, run_ablation, train)
from .core import AblationFlags

log = logging.getLogger("ccenternet")

# Box colours per class id, fixed so annotated images are reproducible.
CLASS_COLORS = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180),
                (70, 240, 240), (240, 50, 230), (210, 245, 60)]


def load_run_config(path: str | None, overrides: Sequence[str]) -> tuple[Any, TrainConfig]:
    data: dict[str, Any] = {}
    if path:
        try:
            data = load_config_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        key, value = parse_override(item)
        data[key] = value
    model_part, train_part = {}, {}
    for key, value in data.items():
        if key in MODEL_KEYS:
            model_part[key] = value
        elif key in TRAIN_KEYS:
            train_part[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return validate_config(model_part), TrainConfig.from_dict(train_part)


def detection_record(image_id: str, det: Detection, class_names: Sequence[str]) -> dict[str, Any]:
    b = det.box
    return {"image_id": image_id, "class_name": class_names[det.class_id], "score": det.score,
            "x_min": b.x_min, "y_min": b.y_min, "x_max": b.x_max, "y_max": b.y_max}


def write_dump(path, dets: dict[str, list[Detection]], class_names: Sequence[str]) -> None:
    with open(path, "w") as f:
        for image_id in sorted(dets):
            for d in dets[image_id]:
                f.write(json.dumps(detection_record(image_id, d, class_names)) + "\n")


def read_dump(path, class_names: Sequence[str]) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read detections {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            cid = class_names.index(rec["class_name"])
            box = BoundingBox(rec["x_min"], rec["y_min"], rec["x_max"], rec["y_max"], cid)
            det = Detection(cid, float(rec["score"]), box)
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}:{n}: bad detection record ({exc})") from None
        out.setdefault(rec["image_id"], []).append(det)
    return out


def draw_detections(pixels: np.ndarray, dets: Sequence[Detection], class_names: Sequence[str]) -> Image.Image:
    arr = np.clip(np.rint(pixels.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr)
    draw = ImageDraw.Draw(im)
    for d in dets:
        color = CLASS_COLORS[d.class_id % len(CLASS_COLORS)]
        draw.rectangle(d.box.as_tuple(), outline=color, width=2)
        label = f"{class_names[d.class_id]} {d.score:.2f}"
        draw.text((d.box.x_min + 2, max(d.box.y_min - 11, 0)), label, fill=color)
    return im


def _ground_truth(manifest: DatasetManifest, split: str) -> dict[str, list[BoundingBox]]:
    records = manifest.subset(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    return {r.id: list(parse_voc_xml(manifest.xml_path(r), manifest.class_names).boxes) for r in records}


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = SynthConfig(per_class=args.per_class, width=args.width, height=args.height,
                      multi_defect_rate=args.multi_defect_rate)
    m = synth_generate(cfg, args.out, args.seed)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "histogram": m.histogram}))
    return 0


def cmd_split(args) -> int:
    try:
        ratios = [float(r) for r in args.ratios.split(",")]
    except ValueError:
        raise ConfigError(f"bad ratios {args.ratios!r}") from None
    m = split_dataset(DatasetManifest.load(args.manifest), ratios, args.seed)
    path = m.save(args.out)
    print(json.dumps({"manifest": str(path), **{s: m.split_histogram(s) for s in ("train", "val", "test")}}))
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config, args.set)
    if args.out:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "checkpoint_dir": args.out})
    res = train(train_cfg, model_cfg, DatasetManifest.load(args.manifest),
                on_epoch=lambda row: print(json.dumps(row), flush=True))
    print(json.dumps({"checkpoint": str(res.checkpoint) if res.checkpoint else None, "val": res.val_metrics}))
    return 0


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        model = ckpt.build_model()
        if tuple(model.cfg.class_names) != tuple(manifest.class_names):
            raise DataError("checkpoint class names do not match the manifest")
        records = manifest.subset(args.split)
        if not records:
            raise DataError(f"split {args.split!r} is empty")
        dets, gts = predict_dataset(model, DetectionDataset(manifest, records, model.cfg), threshold=0.0)
    elif args.dets:
        dets = read_dump(args.dets, manifest.class_names)
        gts = _ground_truth(manifest, args.split)
    else:
        raise ConfigError("eval needs --checkpoint or --dets")
    report = metrics_report(evaluate(dets, gts, len(manifest.class_names), args.iou), manifest.class_names)
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(format_report(report))
    print(text)
    return 0


def _input_images(args) -> list[tuple[str, Path]]:
    if args.manifest:
        m = DatasetManifest.load(args.manifest)
        return [(r.id, m.image_path(r)) for r in m.subset(args.split)]
    return [(Path(p).stem, Path(p)) for p in args.images]


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    cfg = model.cfg
    if args.n_classes is not None and args.n_classes != cfg.n_classes:
        raise DataError(f"checkpoint has {cfg.n_classes} classes, expected {args.n_classes}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_dets: dict[str, list[Detection]] = {}
    for image_id, path in _input_images(args):
        pixels = load_image(path)
        sample = ImageSample(pixels, (), image_id)
        image, _, lb = prepare(sample, cfg)
        with torch.no_grad():
            o = model(image.unsqueeze(0))
        raw = decode(o.heatmap[0], o.offset[0], o.size[0], cfg, threshold=args.threshold)
        dets = lb.inverse_detections(raw, sample.width, sample.height)
        all_dets[image_id] = dets
        draw_detections(pixels, dets, cfg.class_names).save(out / f"{image_id}_pred.png")
    write_dump(out / "detections.jsonl", all_dets, cfg.class_names)
    print(json.dumps({"images": len(all_dets), "detections": sum(map(len, all_dets.values())),
                      "dump": str(out / "detections.jsonl")}))
    return 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config, args.set)
    if args.out:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "checkpoint_dir": args.out})
    rows = AblationFlags.ablation_rows()
    if args.rows:
        rows = [rows[int(i) - 1] for i in args.rows.split(",")]
    results = run_ablation(rows, model_cfg, train_cfg, DatasetManifest.load(args.manifest), args.split)
    table = format_ablation_table(results)
    print(table)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ablation.tsv").write_text(table + "\n")
        (Path(args.out) / "ablation.json").write_text(json.dumps(results, indent=1))
    return 0


def hardware_descriptor() -> str:
    return (f"{platform.platform()}; cpu={platform.processor() or platform.machine()}; "
            f"torch={torch.__version__}; threads={torch.get_num_threads()}; "
            f"cuda={torch.cuda.is_available()}")


def bench(model, images: Sequence[np.ndarray], repeats: int = 10, warmup: int = 1) -> dict[str, Any]:
    """Per-image wall clock of letterbox + forward + decode; warmup runs are not timed."""
    cfg = model.cfg
    model.eval()

    def run(pixels):
        image, _, _ = prepare(ImageSample(pixels, ()), cfg)
        with torch.no_grad():
            o = model(image.unsqueeze(0))
        decode(o.heatmap[0], o.offset[0], o.size[0], cfg)

    for i in range(max(warmup, 1)):
        run(images[i % len(images)])
    samples = []
    for i in range(repeats):
        t0 = time.perf_counter()
        run(images[i % len(images)])
        samples.append((time.perf_counter() - t0) * 1000.0)
    return {"samples_ms": samples, "mean_ms": statistics.fmean(samples), "median_ms": statistics.median(samples),
            "input_size": list(cfg.input_size), "hardware": hardware_descriptor()}


def cmd_bench(args) -> int:
    model = load_checkpoint(args.checkpoint).build_model()
    images = [load_image(p) for _, p in _input_images(args)]
    if not images:
        raise DataError("no images to benchmark")
    print(json.dumps(bench(model, images, args.repeats, args.warmup), indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccenternet", description="Anchor-free cigarette defect detector.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset (PNG + VOC XML + manifest)")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=600)
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--multi-defect-rate", type=float, default=0.0)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="stratified train/val/test split of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ratios", default="0.6,0.2,0.2")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output manifest path (default: overwrite input)")
    s.set_defaults(func=cmd_split)

    def add_config(sp):
        sp.add_argument("--config", help="flat YAML key-value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    t = sub.add_parser("train", help="train a model on the manifest's train split")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", help="checkpoint directory")
    add_config(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class AP, mAP and P/R for a split")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--checkpoint")
    e.add_argument("--dets", help="detection dump (JSON lines) instead of a checkpoint")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="annotated images and a detection dump")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--images", nargs="*", default=[])
    pr.add_argument("--manifest", help="take images from this manifest instead")
    pr.add_argument("--split", default="test")
    pr.add_argument("--threshold", type=float, default=0.3)
    pr.add_argument("--n-classes", type=int, help="fail unless the checkpoint has this many classes")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train/evaluate the module ablation rows")
    a.add_argument("--manifest", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--rows", help="comma-separated row numbers 1-6 (default: all)")
    a.add_argument("--out")
    add_config(a)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="informational per-image timing")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--images", nargs="*", default=[])
    b.add_argument("--manifest")
    b.add_argument("--split", default="test")
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--warmup", type=int, default=1)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CCenterNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
