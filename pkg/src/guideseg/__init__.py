"""Desk-scale domain-adaptive segmentation with class mixing and guidance training."""

from .guider import Guider, GuiderConfig
from .losses import LossBreakdown, LossConfig, beta, ce_loss, guidance_loss, total_loss
from .mixing import ClassMask, ClassMixBatch, build_mask, downsample_mask, mix, sample_classes
from .model import SegModel, SegModelConfig
from .selftrain import EmaTeacher, PseudoLabel, pixel_weights, pseudo_from_logits, pseudo_label
from .shapeworld import (
    IGNORE,
    DomainShift,
    LabeledImage,
    SceneSpec,
    generate_scene,
    read_dataset,
    render_domain,
    write_dataset,
)
from .trainer import RunConfig, TrainConfig, build_trainer, fit, train_step

__version__ = "0.1.0"

__all__ = [
    "Guider",
    "GuiderConfig",
    "LossBreakdown",
    "LossConfig",
    "beta",
    "ce_loss",
    "guidance_loss",
    "total_loss",
    "ClassMask",
    "ClassMixBatch",
    "build_mask",
    "downsample_mask",
    "mix",
    "sample_classes",
    "SegModel",
    "SegModelConfig",
    "EmaTeacher",
    "PseudoLabel",
    "pixel_weights",
    "pseudo_from_logits",
    "pseudo_label",
    "IGNORE",
    "DomainShift",
    "LabeledImage",
    "SceneSpec",
    "generate_scene",
    "read_dataset",
    "render_domain",
    "write_dataset",
    "RunConfig",
    "TrainConfig",
    "build_trainer",
    "fit",
    "train_step",
]
