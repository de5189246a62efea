"""Boundary-aware salient object segmentation toolkit: predict-refine
network, hybrid BCE/SSIM/IoU loss, five-measure evaluation suite, training
harness, and a background-removal HTTP service."""

from .core import LossBreakdown, LossTerms, MetricReport, Sample, clamp_probability
from .losses import LossConfig, SSIMParams, bce_loss, hybrid_loss, iou_loss, ssim_loss, total_loss
from .metrics import (BoundaryParams, e_measure_mean, evaluate_dataset, evaluate_pair,
                      mae, relaxed_boundary_fbeta, s_measure, weighted_fbeta)
from .model import Architecture, SegmentationModel, build_model
from .prednet import PredNetConfig, build_prediction_module, forward_prediction
from .refinement import RRMVariant, build_refinement_module, forward_refine

__all__ = [
    "Architecture", "BoundaryParams", "LossBreakdown", "LossConfig", "LossTerms",
    "MetricReport", "PredNetConfig", "RRMVariant", "SSIMParams", "Sample",
    "SegmentationModel", "bce_loss", "build_model", "build_prediction_module",
    "build_refinement_module", "clamp_probability", "e_measure_mean",
    "evaluate_dataset", "evaluate_pair", "forward_prediction", "forward_refine",
    "hybrid_loss", "iou_loss", "mae", "relaxed_boundary_fbeta", "s_measure",
    "ssim_loss", "total_loss", "weighted_fbeta",
]

__version__ = "0.1.0"
