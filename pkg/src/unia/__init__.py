"""Uncertainty-aware CAM pipeline for weakly supervised segmentation.

Library layout:
  tensor       float64 autodiff core
  encoder      patch-attention backbone, classifier, CAM generation
  uncertainty  Gaussian feature field, sampling, soft ambiguity masking
  affinity     Sinkhorn-balanced attention affinity, walk + pixel refinement
  refine       pseudo masks, mutual complementing refinement, affinity loss
  seg          dilated decoder and segmentation losses
  synth        synthetic ambiguity benchmark generator
  pipeline     config, training loop, evaluation, inference
  cli          command-line entry points
"""

from .tensor import Tensor, grad_check, no_grad

__all__ = ["Tensor", "grad_check", "no_grad"]
__version__ = "0.1.0"
