"""Patch-attention encoder, classification head, and CAM generation.

A deliberately small pre-norm transformer over image patches: it produces
the shared feature grid used by every downstream stage, records each
block's post-softmax attention (the raw material for pairwise affinity),
and hosts the max-pooled multi-label classifier whose weights project
features into per-class activation maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ParameterError, Tensor


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 48
    blocks: int = 4
    heads: int = 4
    num_classes: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ParameterError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.channels % self.heads != 0:
            raise ParameterError(f"channels {self.channels} not divisible by heads {self.heads}")
        if not 1 <= self.num_classes <= 8:
            raise ParameterError(f"num_classes must be in 1..8, got {self.num_classes}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


@dataclass
class EncoderOutput:
    Z: Tensor                      # [C, H', W'] feature grid
    attn: list = field(default_factory=list)  # per block: [heads, n, n]
    cls_weight: Tensor | None = None


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    vals = np.clip(rng.standard_normal(shape) * std, -2 * std, 2 * std)
    return Tensor(vals, requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return gamma * (centered / T.sqrt(var + eps)) + beta


def locality_bias(grid: int, scale: float = 0.7) -> np.ndarray:
    """Pairwise attention-logit bias favoring nearby grid cells.

    From-scratch attention at this scale starts near uniform, which makes
    attention-derived affinity useless for propagation; seeding each
    block's learnable bias with a distance kernel gives tokens a local
    receptive field up front while training remains free to reshape it.
    """
    yy, xx = np.divmod(np.arange(grid * grid), grid)
    d2 = (yy[:, None] - yy[None, :]) ** 2 + (xx[:, None] - xx[None, :]) ** 2
    return -d2 / (2.0 * scale * scale)


class Encoder:
    """Pre-norm self-attention blocks over patch tokens."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.channels
        patch_dim = 3 * cfg.patch_size * cfg.patch_size
        hidden = 2 * c
        p: dict[str, Tensor] = {}
        p["backbone.patch.weight"] = trunc_normal(rng, (patch_dim, c))
        p["backbone.patch.bias"] = zeros_param((c,))
        p["backbone.pos"] = trunc_normal(rng, (cfg.tokens, c))
        for b in range(cfg.blocks):
            pre = f"backbone.block{b}."
            p[pre + "ln1.gamma"] = ones_param((c,))
            p[pre + "ln1.beta"] = zeros_param((c,))
            p[pre + "attn_bias"] = Tensor(locality_bias(cfg.grid), requires_grad=True)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = trunc_normal(rng, (c, c))
                p[pre + name + "_b"] = zeros_param((c,))
            p[pre + "ln2.gamma"] = ones_param((c,))
            p[pre + "ln2.beta"] = zeros_param((c,))
            p[pre + "mlp.w1"] = trunc_normal(rng, (c, hidden))
            p[pre + "mlp.b1"] = zeros_param((hidden,))
            p[pre + "mlp.w2"] = trunc_normal(rng, (hidden, c))
            p[pre + "mlp.b2"] = zeros_param((c,))
        p["backbone.ln_f.gamma"] = ones_param((c,))
        p["backbone.ln_f.beta"] = zeros_param((c,))
        self.params = p

    def patch_embed(self, image: Tensor | np.ndarray) -> Tensor:
        """Image [3, H, W] -> tokens [n, C] (linear patch map + position)."""
        img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        cfg = self.cfg
        if img.shape != (3, cfg.image_size, cfg.image_size):
            raise ParameterError(
                f"image shape {img.shape} does not match config "
                f"(3, {cfg.image_size}, {cfg.image_size})"
            )
        ps, g = cfg.patch_size, cfg.grid
        patches = (
            img.reshape(3, g, ps, g, ps)
            .transpose(1, 3, 0, 2, 4)
            .reshape(g * g, 3 * ps * ps)
        )
        tokens = Tensor(patches) @ self.params["backbone.patch.weight"]
        return tokens + self.params["backbone.patch.bias"] + self.params["backbone.pos"]

    def _attention(self, xn: Tensor, pre: str) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        n, c = cfg.tokens, cfg.channels
        hd = c // cfg.heads
        p = self.params
        q = (xn @ p[pre + "wq"] + p[pre + "wq_b"]).reshape(n, cfg.heads, hd).transpose((1, 0, 2))
        k = (xn @ p[pre + "wk"] + p[pre + "wk_b"]).reshape(n, cfg.heads, hd).transpose((1, 0, 2))
        v = (xn @ p[pre + "wv"] + p[pre + "wv_b"]).reshape(n, cfg.heads, hd).transpose((1, 0, 2))
        scores = (q @ k.transpose((0, 2, 1))) * (1.0 / np.sqrt(hd)) + p[pre + "attn_bias"]
        attn = T.softmax_lastdim(scores)
        ctx = (attn @ v).transpose((1, 0, 2)).reshape(n, c)
        return ctx @ p[pre + "wo"] + p[pre + "wo_b"], attn

    def forward(self, tokens: Tensor) -> EncoderOutput:
        cfg = self.cfg
        p = self.params
        x = tokens
        attn_maps = []
        for b in range(cfg.blocks):
            pre = f"backbone.block{b}."
            xn = layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
            out, attn = self._attention(xn, pre)
            attn_maps.append(attn)
            x = x + out
            xn = layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
            m = T.relu(xn @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"])
            x = x + (m @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"])
        x = layer_norm(x, p["backbone.ln_f.gamma"], p["backbone.ln_f.beta"])
        z = x.transpose((1, 0)).reshape(cfg.channels, cfg.grid, cfg.grid)
        return EncoderOutput(Z=z, attn=attn_maps)

    def encode_image(self, image) -> EncoderOutput:
        return self.forward(self.patch_embed(image))


def gmp_logits(features: Tensor, cls_weight: Tensor) -> Tensor:
    """Spatial max of each classifier-projected map: [C, H, W] x [C, M] -> [M]."""
    c, h, w = features.shape
    if cls_weight.shape[0] != c:
        raise ParameterError(
            f"classifier weight {cls_weight.shape} does not match {c} feature channels"
        )
    proj = cls_weight.transpose((1, 0)) @ features.reshape(c, h * w)
    return T.max_lastdim(proj)


def classification_loss(logits: Tensor, y: np.ndarray) -> Tensor:
    """Multi-label soft margin loss, mean over classes; log args clamped at 1e-12."""
    y = np.asarray(y, dtype=np.float64)
    phi = T.sigmoid(logits)
    pos = Tensor(y) * T.log(T.clamp_min(phi, 1e-12))
    negt = Tensor(1.0 - y) * T.log(T.clamp_min(1.0 - phi, 1e-12))
    return -(pos + negt).mean()


def cam(features: Tensor, cls_weight: Tensor) -> Tensor:
    """Per-class activation maps in [0, 1].

    relu of the classifier projection, max-normalized per class. The
    normalizer is treated as a constant so that activation maps act as
    targets, not gradient paths, downstream. An all-zero map stays zero.
    """
    c, h, w = features.shape
    proj = T.relu(cls_weight.transpose((1, 0)) @ features.reshape(c, h * w))
    peaks = proj.data.max(axis=-1)
    denom = np.where(peaks > 0, peaks, 1.0)[:, None]
    return (proj / Tensor(denom)).reshape(cls_weight.shape[1], h, w)


def mask_absent_classes(cam_stack: Tensor, y: np.ndarray) -> Tensor:
    """Zero the map of every class not present in the image-level labels."""
    mask = np.asarray(y, dtype=np.float64).reshape(-1, 1, 1)
    return cam_stack * Tensor(mask)
