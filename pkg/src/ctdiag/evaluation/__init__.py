"""Benchmark metrics: image classification, box AP and the error breakdown."""
from .classification import PredictionMismatch, auc, classification_metrics, confusion, metrics_from_confusion
from .detection import (CATEGORY_VIEWS, IOU_THRESHOLDS, MODES, RECALL_POINTS, build_scenes, detection_ap,
                        interpolate, iou, iou_matrix, pr_points, scenes_ap)
from .errors import CURVES, curve_areas, error_analysis, error_curves
from .report import (EvalReport, PredictionSchemaError, ProtocolViolation, build_report, check_filtered,
                     evaluate_run, load_predictions, parse_predictions, save_predictions, write_report)
