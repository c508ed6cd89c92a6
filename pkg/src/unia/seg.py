"""Dilated-convolution decoder and its losses.

Two 3x3 convolutions with dilation 2 widen the receptive field over the
shared feature grid, then a 1x1 projection produces background-plus-class
logits. The cross-entropy against pseudo labels skips ignored pixels;
pseudo labels never carry gradients back into the trunk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import trunc_normal, zeros_param
from .refine import IGNORE
from .tensor import Tensor

CONSISTENCY_WEIGHT = 0.05


class DataError(ValueError):
    """Labels out of range for the decoder's class count."""


def _conv_indices(channels: int, h: int, w: int, k: int, dilation: int) -> np.ndarray:
    """Flat gather indices turning a zero-padded grid into im2col columns."""
    pad = dilation * (k // 2)
    hp, wp = h + 2 * pad, w + 2 * pad
    ys = np.arange(h)[:, None] + np.arange(k)[None, :] * dilation   # [h, k]
    xs = np.arange(w)[:, None] + np.arange(k)[None, :] * dilation   # [w, k]
    c_idx = np.arange(channels)[:, None, None, None, None] * (hp * wp)
    y_idx = ys[None, :, None, :, None] * wp
    x_idx = xs[None, None, :, None, :]
    idx = c_idx + y_idx + x_idx                                     # [C, h, w, k, k]
    return idx.transpose(0, 3, 4, 1, 2).reshape(channels * k * k, h * w)


class SegHead:
    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator):
        self.channels = channels
        self.num_classes = num_classes
        k = 3
        p: dict[str, Tensor] = {}
        p["seg_head.conv1.w"] = trunc_normal(rng, (channels, channels * k * k))
        p["seg_head.conv1.b"] = zeros_param((channels,))
        p["seg_head.conv2.w"] = trunc_normal(rng, (channels, channels * k * k))
        p["seg_head.conv2.b"] = zeros_param((channels,))
        p["seg_head.proj.w"] = trunc_normal(rng, (num_classes + 1, channels))
        p["seg_head.proj.b"] = zeros_param((num_classes + 1,))
        self.params = p
        self._idx_cache: dict[tuple, np.ndarray] = {}

    def _conv(self, x: Tensor, w: Tensor, b: Tensor, dilation: int = 2) -> Tensor:
        c, h, width = x.shape
        key = (c, h, width, dilation)
        idx = self._idx_cache.get(key)
        if idx is None:
            idx = _conv_indices(c, h, width, 3, dilation)
            self._idx_cache[key] = idx
        pad = dilation
        cols = T.gather_flat(T.pad2d(x, pad, pad, pad, pad), idx)
        out = w @ cols + b.reshape(-1, 1)
        return out.reshape(w.shape[0], h, width)

    def forward(self, features: Tensor) -> "SegOutput":
        p = self.params
        x = T.relu(self._conv(features, p["seg_head.conv1.w"], p["seg_head.conv1.b"]))
        x = T.relu(self._conv(x, p["seg_head.conv2.w"], p["seg_head.conv2.b"]))
        c, h, w = x.shape
        logits = (p["seg_head.proj.w"] @ x.reshape(c, h * w) + p["seg_head.proj.b"].reshape(-1, 1))
        logits = logits.reshape(self.num_classes + 1, h, w)
        probs = T.softmax_lastdim(logits.reshape(self.num_classes + 1, h * w).transpose((1, 0)))
        return SegOutput(logits=logits, probs=probs.transpose((1, 0)).reshape(logits.shape))


@dataclass
class SegOutput:
    logits: Tensor    # [M+1, H, W]
    probs: Tensor     # [M+1, H, W], channel-axis softmax


def seg_loss(out: SegOutput, pseudo_mask: np.ndarray) -> Tensor:
    """Mean -log p(label) over non-ignored pixels; all-ignored masks give 0."""
    mask = np.asarray(pseudo_mask)
    mplus1, h, w = out.logits.shape
    if mask.shape != (h, w):
        raise DataError(f"pseudo mask {mask.shape} does not match logit grid {(h, w)}")
    labels = mask.reshape(-1)
    valid = labels != IGNORE
    if not valid.any():
        return Tensor(0.0)
    if labels[valid].max() >= mplus1 or labels[valid].min() < 0:
        raise DataError(
            f"pseudo label {labels[valid].max()} out of range for {mplus1 - 1} classes"
        )
    flat = out.logits.reshape(mplus1, h * w)
    shift = Tensor(flat.data.max(axis=0, keepdims=True))  # stability constant
    shifted = flat - shift
    log_z = T.log(T.exp(shifted).sum(axis=0, keepdims=True))
    log_probs = shifted - log_z
    pix = np.flatnonzero(valid)
    picked = T.gather_flat(log_probs, labels[pix] * (h * w) + pix)
    return -picked.mean()


def consistency_reg(out: SegOutput, cam_stack: Tensor) -> Tensor:
    """Mean absolute gap between foreground probabilities and the CAM stack.

    The CAM side acts as the target and is treated as constant; apply
    CONSISTENCY_WEIGHT when combining into the training objective.
    """
    mplus1, h, w = out.probs.shape
    m = mplus1 - 1
    if cam_stack.shape != (m, h, w):
        raise DataError(f"CAM stack {cam_stack.shape} does not match probs {(m, h, w)}")
    fg_idx = np.arange(h * w, (m + 1) * h * w)
    fg_probs = T.gather_flat(out.probs, fg_idx).reshape(m, h, w)
    return T.absolute(fg_probs - Tensor(cam_stack.data)).mean()
