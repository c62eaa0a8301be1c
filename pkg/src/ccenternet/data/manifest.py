from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from ..core import CLASS_NAMES, DataError

SPLITS = ("train", "val", "test")


@dataclass
class Record:
    id: str
    image: str  # relative to the manifest directory
    xml: str
    label: str  # primary class name, used for stratification
    split: str = ""


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = Path(".")
    seed: int = 0
    class_names: tuple[str, ...] = CLASS_NAMES
    extra: dict = field(default_factory=dict)

    @property
    def histogram(self) -> dict[str, int]:
        counts = Counter(r.label for r in self.records)
        return {name: counts.get(name, 0) for name in self.class_names}

    def split_histogram(self, split: str) -> dict[str, int]:
        counts = Counter(r.label for r in self.records if r.split == split)
        return {name: counts.get(name, 0) for name in self.class_names}

    def subset(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def image_path(self, r: Record) -> Path:
        return self.root / r.image

    def xml_path(self, r: Record) -> Path:
        return self.root / r.xml

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "class_names": list(self.class_names),
            "histogram": self.histogram,
            "extra": self.extra,
            "records": [vars(r) for r in self.records],
        }, indent=1)

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            data = json.loads(path.read_text())
            records = [Record(**r) for r in data["records"]]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        return cls(records, path.parent, data.get("seed", 0),
                   tuple(data.get("class_names", CLASS_NAMES)), data.get("extra", {}))
