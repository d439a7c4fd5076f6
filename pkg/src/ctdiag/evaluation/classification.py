from __future__ import annotations

import numpy as np

from ..data import DIAGNOSIS_CLASSES, DatasetIndex

TB = DIAGNOSIS_CLASSES.index("tb")


class PredictionMismatch(ValueError):
    pass


def auc(scores, labels) -> float:
    """ROC area = (concordant + ties / 2) / (P * N); NaN when a class is missing."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = np.sort(scores[labels]), np.sort(scores[~labels])
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    concordant = int(below.sum())
    ties = int((upto - below).sum())
    return (concordant + 0.5 * ties) / (len(pos) * len(neg))


def confusion(gt, pred, k=3) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (np.asarray(gt), np.asarray(pred)), 1)
    return m


def metrics_from_confusion(m: np.ndarray) -> dict[str, float]:
    """Accuracy, sensitivity, specificity, macro precision (ap) and recall (ar), all in percent.

    Macro precision averages over classes that occur in the ground truth or
    predictions (precision is 0 for a class that is never predicted); macro
    recall averages over classes present in the ground truth.
    """
    total = m.sum()
    tp = np.diag(m)
    gt_n = m.sum(axis=1)
    pred_n = m.sum(axis=0)
    precisions = [tp[c] / pred_n[c] if pred_n[c] else 0.0 for c in range(len(m)) if gt_n[c] or pred_n[c]]
    recalls = [tp[c] / gt_n[c] for c in range(len(m)) if gt_n[c]]
    non_tb = [c for c in range(len(m)) if c != TB]
    non_tb_total = m[np.ix_(non_tb, range(len(m)))].sum()
    non_tb_right = m[np.ix_(non_tb, non_tb)].sum()
    nan = float("nan")
    return {k: float(v) for k, v in {
        "accuracy": 100.0 * tp.sum() / total if total else nan,
        "sensitivity": 100.0 * tp[TB] / gt_n[TB] if gt_n[TB] else nan,
        "specificity": 100.0 * non_tb_right / non_tb_total if non_tb_total else nan,
        "ap": 100.0 * float(np.mean(precisions)) if precisions else nan,
        "ar": 100.0 * float(np.mean(recalls)) if recalls else nan,
    }.items()}


def classification_metrics(predictions, index: DatasetIndex) -> dict[str, float]:
    """Six image-level metrics (percent) over every record of ``index``."""
    by_id = {}
    for p in predictions:
        if p.image_id in by_id:
            raise PredictionMismatch(f"duplicate prediction for image {p.image_id!r}")
        by_id[p.image_id] = p
    missing = [r.image_id for r in index.records if r.image_id not in by_id]
    if missing:
        raise PredictionMismatch(f"{len(missing)} image(s) without prediction, e.g. {missing[:3]}")
    extra = set(by_id) - {r.image_id for r in index.records}
    if extra:
        raise PredictionMismatch(f"{len(extra)} prediction(s) for unknown images, e.g. {sorted(extra)[:3]}")
    gt = [DIAGNOSIS_CLASSES.index(r.diagnosis) for r in index.records]
    probs = np.array([by_id[r.image_id].class_probs for r in index.records], dtype=float).reshape(-1, 3)
    pred = probs.argmax(axis=1) if len(probs) else np.zeros(0, dtype=int)
    out = metrics_from_confusion(confusion(gt, pred))
    out["auc_tb"] = 100.0 * auc(probs[:, TB], np.asarray(gt) == TB) if len(probs) else float("nan")
    return {k: float(out[k]) for k in ("accuracy", "auc_tb", "sensitivity", "specificity", "ap", "ar")}
