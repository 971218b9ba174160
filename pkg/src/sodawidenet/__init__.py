"""Salient object detection: hybrid dilated-convolution/attention model,
dual foreground/background supervision, data tooling, and evaluation metrics."""

from .config import ConfigurationError, ModelConfig, PARAM_TARGETS_M, preset
from .losses import (
    LossBreakdown,
    background_logits,
    bg_ground_truth,
    contour_head_loss,
    dice_loss,
    fg_weight_map,
    saliency_head_loss,
    total_loss,
    weighted_bce,
    weighted_iou,
    weighted_l1,
)
from .metrics import MetricReport, e_measure, evaluate_pairs, f_max, mae, s_measure, weighted_f
from .model import (
    HeadId,
    SODAWideNetPP,
    build_model,
    full_head_set,
    init_weights,
    parameter_count,
)
from .train import TrainPlan, finetune_plan, lr_at_epoch, pretrain_plan, train

__all__ = [
    "ConfigurationError",
    "ModelConfig",
    "PARAM_TARGETS_M",
    "preset",
    "LossBreakdown",
    "background_logits",
    "bg_ground_truth",
    "contour_head_loss",
    "dice_loss",
    "fg_weight_map",
    "saliency_head_loss",
    "total_loss",
    "weighted_bce",
    "weighted_iou",
    "weighted_l1",
    "MetricReport",
    "e_measure",
    "evaluate_pairs",
    "f_max",
    "mae",
    "s_measure",
    "weighted_f",
    "HeadId",
    "SODAWideNetPP",
    "build_model",
    "full_head_set",
    "init_weights",
    "parameter_count",
    "TrainPlan",
    "finetune_plan",
    "lr_at_epoch",
    "pretrain_plan",
    "train",
]
