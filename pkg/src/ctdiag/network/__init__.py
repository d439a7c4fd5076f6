from .backbone import FPN, ResNet50Backbone, TinyResNet
from .boxes import (ImagePrediction, PredictedBox, RawOutputs, box_iou, decode_boxes, encode_boxes,
                    generate_anchors, postprocess, xywh_to_xyxy, xyxy_to_xywh)
from .heads import ClassificationHead, DetectionHead
from .model import ModelConfig, TBDiagnosisNet, level_shapes, load_checkpoint, parameter_checksum, save_checkpoint

__all__ = [
    "FPN", "ResNet50Backbone", "TinyResNet", "ClassificationHead", "DetectionHead",
    "ImagePrediction", "PredictedBox", "RawOutputs", "box_iou", "decode_boxes", "encode_boxes",
    "generate_anchors", "postprocess", "xywh_to_xyxy", "xyxy_to_xywh",
    "ModelConfig", "TBDiagnosisNet", "level_shapes", "load_checkpoint", "parameter_checksum", "save_checkpoint",
]
