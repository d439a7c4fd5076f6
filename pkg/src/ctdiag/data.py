"""Annotation schema, dataset splits, validation and statistics.

The on-disk format is a single JSON document::

    {"images": [{"id", "file_name", "width", "height", "gender", "age", "image_class"}],
     "annotations": [{"image_id", "bbox": [x, y, w, h], "tb_class"}],
     "split": "train"}

Boxes use top-left corner plus width/height in continuous pixel units.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IMAGE_CLASSES = (
    "healthy",
    "sick_non_tb",
    "tb_active",
    "tb_latent",
    "tb_active_latent",
    "tb_uncertain",
)
TB_IMAGE_CLASSES = ("tb_active", "tb_latent", "tb_active_latent", "tb_uncertain")
# image classes that carry typed boxes and may enter detection training
TYPED_TB_CLASSES = ("tb_active", "tb_latent", "tb_active_latent")
BOX_CLASSES = ("active_tb", "latent_tb")
DIAGNOSIS_CLASSES = ("healthy", "sick_non_tb", "tb")
GENDERS = ("male", "female", "unknown")
SPLITS = ("train", "val", "test", "trainval")

# Published split sizes of the TBX11K dataset.
TBX11K_SPLITS = {
    "train": {"healthy": 3000, "sick_non_tb": 3000, "tb_active": 473, "tb_latent": 104,
              "tb_active_latent": 23, "tb_uncertain": 0},
    "val": {"healthy": 800, "sick_non_tb": 800, "tb_active": 157, "tb_latent": 36,
            "tb_active_latent": 7, "tb_uncertain": 0},
    "test": {"healthy": 1200, "sick_non_tb": 1200, "tb_active": 294, "tb_latent": 72,
             "tb_active_latent": 24, "tb_uncertain": 10},
}


class AnnotationParseError(ValueError):
    """The annotation file is not valid JSON or does not follow the schema layout."""


class DatasetValidationError(ValueError):
    """One or more records violate the annotation invariants."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__(f"{len(self.problems)} invalid record(s):\n" + "\n".join(self.problems))


@dataclass(frozen=True)
class TbBox:
    x: float
    y: float
    w: float
    h: float
    tb_class: str | None = None

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass
class CxrRecord:
    image_id: str
    file_name: str
    width: int
    height: int
    image_class: str
    gender: str = "unknown"
    age: int = -1
    boxes: list[TbBox] = field(default_factory=list)

    @property
    def is_tb(self) -> bool:
        return self.image_class in TB_IMAGE_CLASSES

    @property
    def diagnosis(self) -> str:
        """Image label collapsed to healthy / sick_non_tb / tb."""
        return "tb" if self.is_tb else self.image_class

    def problems(self) -> list[str]:
        out = []
        tag = f"record {self.image_id!r}"
        if self.image_class not in IMAGE_CLASSES:
            out.append(f"{tag}: unknown image_class {self.image_class!r}")
            return out
        if self.gender not in GENDERS:
            out.append(f"{tag}: unknown gender {self.gender!r}")
        if self.width <= 0 or self.height <= 0:
            out.append(f"{tag}: non-positive image size {self.width}x{self.height}")
        if self.is_tb and not self.boxes:
            out.append(f"{tag}: {self.image_class} image without boxes")
        if not self.is_tb and self.boxes:
            out.append(f"{tag}: {self.image_class} image must not carry boxes")
        for b in self.boxes:
            if b.w <= 0 or b.h <= 0:
                out.append(f"{tag}: degenerate box {b.as_list()}")
            elif b.x < 0 or b.y < 0 or b.x + b.w > self.width or b.y + b.h > self.height:
                out.append(f"{tag}: box {b.as_list()} outside {self.width}x{self.height} image")
        if self.image_class == "tb_uncertain":
            return out
        kinds = {b.tb_class for b in self.boxes}
        if self.is_tb and not kinds <= set(BOX_CLASSES):
            out.append(f"{tag}: typed image has boxes with tb_class {sorted(map(str, kinds))}")
        expected = {"tb_active": {"active_tb"}, "tb_latent": {"latent_tb"},
                    "tb_active_latent": {"active_tb", "latent_tb"}}.get(self.image_class)
        if expected is not None and self.boxes and kinds != expected:
            out.append(f"{tag}: {self.image_class} requires box classes {sorted(expected)}, "
                       f"got {sorted(map(str, kinds))}")
        return out


@dataclass
class DatasetIndex:
    split: str
    records: list[CxrRecord]
    root: Path | None = None

    @property
    def class_counts(self) -> dict[str, int]:
        counts = Counter(r.image_class for r in self.records)
        return {c: counts.get(c, 0) for c in IMAGE_CLASSES}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict[str, CxrRecord]:
        return {r.image_id: r for r in self.records}

    def subset(self, classes: Iterable[str]) -> "DatasetIndex":
        keep = set(classes)
        return DatasetIndex(self.split, [r for r in self.records if r.image_class in keep], self.root)

    def image_path(self, record: CxrRecord) -> Path:
        root = self.root if self.root is not None else Path(".")
        return root / record.file_name

    def validate(self) -> None:
        problems = []
        if self.split not in SPLITS:
            problems.append(f"unknown split {self.split!r}")
        seen = Counter(r.image_id for r in self.records)
        problems += [f"duplicate image_id {i!r}" for i, n in seen.items() if n > 1]
        for r in self.records:
            problems += r.problems()
        if problems:
            raise DatasetValidationError(problems)


def _parse(doc, split: str | None) -> DatasetIndex:
    try:
        images = doc["images"]
        annotations = doc["annotations"]
        file_split = doc["split"]
        records, lookup = [], {}
        for im in images:
            rec = CxrRecord(
                image_id=str(im["id"]),
                file_name=str(im["file_name"]),
                width=int(im["width"]),
                height=int(im["height"]),
                gender=im.get("gender", "unknown"),
                age=int(im.get("age", -1)),
                image_class=im["image_class"],
            )
            records.append(rec)
            lookup.setdefault(rec.image_id, rec)
        orphans = []
        for ann in annotations:
            x, y, w, h = (float(v) for v in ann["bbox"])
            rec = lookup.get(str(ann["image_id"]))
            if rec is None:
                orphans.append(f"annotation refers to unknown image_id {ann['image_id']!r}")
                continue
            rec.boxes.append(TbBox(x, y, w, h, ann.get("tb_class")))
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationParseError(f"annotation document does not follow the schema: {exc!r}") from exc
    if split is not None and split != file_split:
        orphans.append(f"file holds split {file_split!r}, requested {split!r}")
    index = DatasetIndex(file_split, records)
    try:
        index.validate()
    except DatasetValidationError as err:
        raise DatasetValidationError(orphans + err.problems) from None
    if orphans:
        raise DatasetValidationError(orphans)
    return index


def load_dataset(path, split: str | None = None) -> DatasetIndex:
    """Read and validate an annotation file.

    Image paths in the returned index resolve relative to the directory
    holding ``images/`` (the parent of the annotation file's directory when
    the file sits in ``annotations/``, otherwise its own directory).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{path}: {exc}") from exc
    index = _parse(doc, split)
    index.root = path.parent.parent if path.parent.name == "annotations" else path.parent
    return index


def to_document(index: DatasetIndex) -> dict:
    images, annotations = [], []
    for r in index.records:
        images.append({"id": r.image_id, "file_name": r.file_name, "width": r.width,
                       "height": r.height, "gender": r.gender, "age": r.age,
                       "image_class": r.image_class})
        for b in r.boxes:
            annotations.append({"image_id": r.image_id, "bbox": b.as_list(), "tb_class": b.tb_class})
    return {"images": images, "annotations": annotations, "split": index.split}


def dumps(index: DatasetIndex) -> str:
    return json.dumps(to_document(index), indent=1) + "\n"


def save_dataset(index: DatasetIndex, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(index))
    return path


def split_stats(index: DatasetIndex) -> dict[str, int]:
    """Per-class image counts plus ``total``."""
    stats = dict(index.class_counts)
    stats["total"] = len(index.records)
    return stats


def box_area_histogram(index: DatasetIndex, bin_edges: Sequence[float]) -> np.ndarray:
    """Count TB box areas (w*h) per ``(edge[i], edge[i+1]]`` bin.

    The first bin also includes its left edge. Areas outside the edges are not counted.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be a strictly increasing sequence of at least two values")
    areas = np.array([b.area for r in index.records for b in r.boxes], dtype=float)
    counts = np.zeros(len(edges) - 1, dtype=int)
    if areas.size == 0:
        return counts
    inside = (areas >= edges[0]) & (areas <= edges[-1])
    bins = np.searchsorted(edges, areas[inside], side="left") - 1
    np.add.at(counts, np.clip(bins, 0, len(counts) - 1), 1)
    return counts
