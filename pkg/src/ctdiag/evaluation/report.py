"""Predictions-file loading, the evaluation report and its on-disk artifacts."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..data import BOX_CLASSES, DatasetIndex, load_dataset
from ..network.boxes import TB_INDEX, ImagePrediction, PredictedBox
from .classification import classification_metrics
from .detection import CATEGORY_VIEWS, MODES, detection_ap
from .errors import CURVES, curve_areas, error_analysis

_METRICS = ("accuracy", "auc_tb", "sensitivity", "specificity", "ap", "ar")
_METRIC_HEADERS = ("Accuracy", "AUC (TB)", "Sensitivity", "Specificity", "Ave. Prec. (AP)", "Ave. Rec. (AR)")


class PredictionSchemaError(ValueError):
    pass


class ProtocolViolation(ValueError):
    """Boxes present on images classified as non-TB when scoring in ``all`` mode."""


def _number(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise PredictionSchemaError(f"{where}: expected a finite number, got {v!r}")
    return float(v)


def parse_predictions(doc) -> list[ImagePrediction]:
    if not isinstance(doc, dict) or not isinstance(doc.get("predictions"), list):
        raise PredictionSchemaError('top level must be an object with a "predictions" list')
    out, seen = [], set()
    for i, p in enumerate(doc["predictions"]):
        where = f"predictions[{i}]"
        if not isinstance(p, dict):
            raise PredictionSchemaError(f"{where}: expected an object")
        iid = p.get("image_id")
        if not isinstance(iid, str) or not iid:
            raise PredictionSchemaError(f"{where}.image_id: expected a non-empty string")
        if iid in seen:
            raise PredictionSchemaError(f"{where}: duplicate image_id {iid!r}")
        seen.add(iid)
        probs = p.get("class_probs")
        if not isinstance(probs, list) or len(probs) != 3:
            raise PredictionSchemaError(f"{where}.class_probs: expected 3 numbers")
        probs = tuple(_number(v, f"{where}.class_probs") for v in probs)
        boxes = p.get("boxes", [])
        if not isinstance(boxes, list):
            raise PredictionSchemaError(f"{where}.boxes: expected a list")
        parsed = []
        for j, b in enumerate(boxes):
            bw = f"{where}.boxes[{j}]"
            if not isinstance(b, dict):
                raise PredictionSchemaError(f"{bw}: expected an object")
            bbox = b.get("bbox")
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise PredictionSchemaError(f"{bw}.bbox: expected [x, y, w, h]")
            bbox = tuple(_number(v, f"{bw}.bbox") for v in bbox)
            if bbox[2] <= 0 or bbox[3] <= 0:
                raise PredictionSchemaError(f"{bw}.bbox: width and height must be positive")
            if b.get("tb_class") not in BOX_CLASSES:
                raise PredictionSchemaError(f"{bw}.tb_class: expected one of {BOX_CLASSES}")
            parsed.append(PredictedBox(bbox, b["tb_class"], _number(b.get("score"), f"{bw}.score")))
        out.append(ImagePrediction(iid, probs, parsed))
    return out


def load_predictions(path) -> list[ImagePrediction]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise PredictionSchemaError(f"{path}: invalid JSON ({e})") from e
    return parse_predictions(doc)


def save_predictions(predictions, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"predictions": [p.to_json() for p in predictions]}, indent=1) + "\n")
    return path


def check_filtered(predictions):
    bad = [p.image_id for p in predictions if p.boxes and p.predicted_class != TB_INDEX]
    if bad:
        raise ProtocolViolation(f"{len(bad)} image(s) classified as non-TB carry boxes, e.g. {bad[:3]}; "
                                "all-mode scoring expects filtered predictions")


def _clean(v):
    return None if isinstance(v, float) and math.isnan(v) else v


@dataclass
class EvalReport:
    classification: dict
    detection: dict = field(default_factory=dict)
    error_analysis: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "classification": {k: _clean(v) for k, v in self.classification.items()},
            "detection": {m: {c: {"ap": _clean(v[0]), "ap50": _clean(v[1])} for c, v in cells.items()}
                          for m, cells in self.detection.items()},
            "error_analysis": {m: {"curves": {k: [float(x) for x in c] for k, c in curves.items()},
                                   "areas": {k: float(a) for k, a in curve_areas(curves).items()}}
                               for m, curves in self.error_analysis.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def classification_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_METRIC_HEADERS)
        w.writerow([_fmt(self.classification[k]) for k in _METRICS])
        return buf.getvalue()

    def detection_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["mode"]
        for c in CATEGORY_VIEWS:
            header += [f"{c} AP50", f"{c} AP"]
        w.writerow(header)
        for m, cells in self.detection.items():
            row = [m]
            for c in CATEGORY_VIEWS:
                ap, ap50 = cells[c]
                row += [_fmt(ap50), _fmt(ap)]
            w.writerow(row)
        return buf.getvalue()


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def _modes(mode: str):
    if mode == "both":
        return MODES
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected all, only_tb or both")
    return (mode,)


def build_report(predictions, index: DatasetIndex, mode: str = "both") -> EvalReport:
    modes = _modes(mode)
    if "all" in modes:
        check_filtered(predictions)
    report = EvalReport(classification_metrics(predictions, index))
    for m in modes:
        report.detection[m] = {c: detection_ap(predictions, index, c, m) for c in CATEGORY_VIEWS}
        report.error_analysis[m] = error_analysis(predictions, index, m)
    return report


def write_report(report: EvalReport, out_dir) -> dict:
    from ..plotting import plot_error_curves

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "classification": out / "classification.csv",
             "detection": out / "detection.csv"}
    paths["report"].write_text(report.to_json())
    paths["classification"].write_text(report.classification_csv())
    paths["detection"].write_text(report.detection_csv())
    for m, curves in report.error_analysis.items():
        paths[f"error_analysis_{m}"] = plot_error_curves(curves, out / f"error_analysis_{m}.svg",
                                                         title=f"category-agnostic, {m}")
    return paths


def evaluate_run(predictions_path, annotations_path, mode: str = "both", out_dir=None) -> EvalReport:
    """Score a predictions file against an annotation file; optionally write artifacts."""
    predictions = load_predictions(predictions_path)
    index = load_dataset(annotations_path)
    report = build_report(predictions, index, mode)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


__all__ = ["EvalReport", "evaluate_run", "build_report", "write_report", "load_predictions",
           "parse_predictions", "save_predictions", "check_filtered", "PredictionSchemaError",
           "ProtocolViolation", "CURVES"]
