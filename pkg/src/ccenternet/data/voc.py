"""LabelImg-compatible Pascal VOC XML reading and writing."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ..core import CLASS_NAMES, BoundingBox, DataError, ImageSample


@dataclass(frozen=True)
class VocAnnotation:
    filename: str
    width: int
    height: int
    boxes: tuple[BoundingBox, ...]
    folder: str = ""


def _num(text: str | None, what: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise DataError(f"bad numeric value for {what}: {text!r}") from None


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def parse_voc_xml(path, class_names: Sequence[str] = CLASS_NAMES) -> VocAnnotation:
    try:
        root = ET.parse(path).getroot()
    except (ET.ParseError, OSError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from None
    size = root.find("size")
    if size is None:
        raise DataError(f"{path}: missing <size>")
    width = int(_num(size.findtext("width"), "width"))
    height = int(_num(size.findtext("height"), "height"))
    if width <= 0 or height <= 0:
        raise DataError(f"{path}: non-positive image size")
    boxes = []
    for obj in root.iter("object"):
        name = (obj.findtext("name") or "").strip()
        if name not in class_names:
            raise DataError(f"{path}: unknown class {name!r}")
        bb = obj.find("bndbox")
        if bb is None:
            raise DataError(f"{path}: object without <bndbox>")
        coords = [_num(bb.findtext(k), k) for k in ("xmin", "ymin", "xmax", "ymax")]
        x0, y0, x1, y1 = coords
        if not (x0 < x1 and y0 < y1):
            raise DataError(f"{path}: degenerate box {coords}")
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
            raise DataError(f"{path}: box {coords} outside {width}x{height} image")
        boxes.append(BoundingBox(x0, y0, x1, y1, class_names.index(name)))
    return VocAnnotation(
        filename=root.findtext("filename") or "",
        width=width,
        height=height,
        boxes=tuple(boxes),
        folder=root.findtext("folder") or "",
    )


def voc_xml_string(ann: VocAnnotation, class_names: Sequence[str] = CLASS_NAMES) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = ann.folder
    ET.SubElement(root, "filename").text = ann.filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = "3"
    ET.SubElement(root, "segmented").text = "0"
    for box in ann.boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = class_names[box.class_id]
        ET.SubElement(obj, "pose").text = "Unspecified"
        ET.SubElement(obj, "truncated").text = "0"
        ET.SubElement(obj, "difficult").text = "0"
        bb = ET.SubElement(obj, "bndbox")
        for key, value in zip(("xmin", "ymin", "xmax", "ymax"), box.as_tuple()):
            ET.SubElement(bb, key).text = _fmt(value)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def write_voc_xml(ann: VocAnnotation, path, class_names: Sequence[str] = CLASS_NAMES) -> None:
    Path(path).write_text(voc_xml_string(ann, class_names))


def load_image(path) -> np.ndarray:
    """PNG/JPEG -> float array (3, H, W) in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return arr.transpose(2, 0, 1).copy()


def save_image(pixels: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(pixels).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_sample(image_path, xml_path, class_names: Sequence[str] = CLASS_NAMES, sample_id: str | None = None) -> ImageSample:
    ann = parse_voc_xml(xml_path, class_names)
    pixels = load_image(image_path)
    if pixels.shape[1:] != (ann.height, ann.width):
        raise DataError(f"{image_path}: image is {pixels.shape[2]}x{pixels.shape[1]}, XML says {ann.width}x{ann.height}")
    return ImageSample(pixels, ann.boxes, sample_id or Path(image_path).stem)
