from .assign import assign_anchors
from .augment import augment, hflip
from .config import TrainConfig, lr_at
from .losses import IGNORE, NEGATIVE, box_regression_loss, focal_loss, smooth_l1
from .loop import (TrainingError, build_samples, mean_first_last, predict, train_stage1, train_stage2,
                   write_loss_log)

__all__ = ["assign_anchors", "augment", "hflip", "TrainConfig", "lr_at", "IGNORE", "NEGATIVE",
           "box_regression_loss", "focal_loss", "smooth_l1", "TrainingError", "build_samples", "predict",
           "train_stage1", "train_stage2", "write_loss_log", "mean_first_last"]
