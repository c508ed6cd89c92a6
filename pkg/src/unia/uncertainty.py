"""Probabilistic feature modeling and uncertainty-guided masking.

The feature grid is modeled as a Gaussian field: a per-channel affine
branch captures local texture statistics while a window-prototype
cross-attention branch contributes global context. Samples drawn by
reparameterization supervise the field through a binary-map fit plus a
KL pull toward the standard normal; the normalized variance acts as an
uncertainty map that softly masks ambiguous features out of the final
representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import trunc_normal, zeros_param
from .tensor import ParameterError, Tensor

_SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))  # softplus(x) = 1


@dataclass
class GaussianFieldParams:
    mu_channel: Tensor
    sigma_channel: Tensor
    mu_spatial: Tensor
    sigma_spatial: Tensor
    mu: Tensor        # mu_channel + mu_spatial
    sigma: Tensor     # softplus(sigma_channel + sigma_spatial), strictly positive


@dataclass
class UncertaintyMap:
    U: Tensor                 # [C, H, W], entries in [0, 1]
    U_spatial: np.ndarray     # [H, W] channel mean, for reporting/export


@dataclass
class SampleBatch:
    S: Tensor                 # [K, C, H, W] reparameterized draws
    seed: int


class UncertaintyNet:
    """Holds the learnable pieces of the probabilistic branch.

    Initialization keeps the branch inert until training shapes it: the
    mean branch starts at the features themselves, the deviation branch
    starts flat near 1 (zero KL pull, no feature coupling), and the
    masking attention starts as an identity-valued local average so the
    heads see familiar features the moment the branch switches on.
    """

    def __init__(self, channels: int, grid: int, rng: np.random.Generator):
        from .encoder import locality_bias  # local import avoids a cycle at module load

        self.channels = channels
        self.grid = grid
        p: dict[str, Tensor] = {}
        # Depth-wise 1x1 scale-and-shift. Mean: identity. Deviation: flat
        # softplus^-1(1) so sigma starts at 1 independent of the features.
        p["uncert.channel.mu_scale"] = Tensor(np.ones(channels), requires_grad=True)
        p["uncert.channel.mu_shift"] = zeros_param((channels,))
        p["uncert.channel.sigma_scale"] = zeros_param((channels,))
        p["uncert.channel.sigma_shift"] = Tensor(
            np.full(channels, _SOFTPLUS_INV_ONE), requires_grad=True
        )
        # Zero-init value paths: the spatial contributions start exactly
        # at zero (so sigma is exactly flat and U is exactly 0 when the
        # branch activates) and grow only as the distribution loss
        # shapes them.
        for branch in ("mu", "sigma"):
            for name in ("wq", "wk"):
                p[f"uncert.spatial.{branch}.{name}"] = trunc_normal(rng, (channels, channels))
                p[f"uncert.spatial.{branch}.{name}_b"] = zeros_param((channels,))
            p[f"uncert.spatial.{branch}.wv"] = zeros_param((channels, channels))
            p[f"uncert.spatial.{branch}.wv_b"] = zeros_param((channels,))
        for name in ("wq", "wk"):
            p[f"uncert.mask.{name}"] = trunc_normal(rng, (channels, channels))
            p[f"uncert.mask.{name}_b"] = zeros_param((channels,))
        p["uncert.mask.wv"] = Tensor(np.eye(channels), requires_grad=True)
        p["uncert.mask.wv_b"] = zeros_param((channels,))
        p["uncert.mask.attn_bias"] = Tensor(locality_bias(grid), requires_grad=True)
        self.params = p

    def channel_params(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Per-channel affine maps of the features: (mu_channel, sigma_channel)."""
        p = self.params
        mu = p["uncert.channel.mu_scale"].reshape(-1, 1, 1) * z + p[
            "uncert.channel.mu_shift"
        ].reshape(-1, 1, 1)
        sigma = p["uncert.channel.sigma_scale"].reshape(-1, 1, 1) * z + p[
            "uncert.channel.sigma_shift"
        ].reshape(-1, 1, 1)
        return mu, sigma

    def cross_attention(self, tokens: Tensor, protos: Tensor, branch: str) -> tuple[Tensor, Tensor]:
        """Tokens [n, C] attend over prototypes [C, N]; returns (out [n, C], attn [n, N])."""
        p = self.params
        c = self.channels
        q = tokens @ p[f"uncert.spatial.{branch}.wq"] + p[f"uncert.spatial.{branch}.wq_b"]
        kv_in = protos.transpose((1, 0))
        k = kv_in @ p[f"uncert.spatial.{branch}.wk"] + p[f"uncert.spatial.{branch}.wk_b"]
        v = kv_in @ p[f"uncert.spatial.{branch}.wv"] + p[f"uncert.spatial.{branch}.wv_b"]
        attn = T.softmax_lastdim((q @ k.transpose((1, 0))) * (1.0 / np.sqrt(c)))
        return attn @ v, attn

    def spatial_params(self, z: Tensor, window_h: int, window_w: int) -> tuple[Tensor, Tensor]:
        """Window-max prototypes + cross-attention: (mu_spatial, sigma_spatial)."""
        c, h, w = z.shape
        if window_h > h or window_w > w:
            raise ParameterError(
                f"prototype window {window_h}x{window_w} exceeds grid {h}x{w}"
            )
        protos = T.window_max_pool(z, window_h, window_w)
        tokens = z.reshape(c, h * w).transpose((1, 0))
        mu_s, _ = self.cross_attention(tokens, protos, "mu")
        sigma_s, _ = self.cross_attention(tokens, protos, "sigma")
        return (
            mu_s.transpose((1, 0)).reshape(c, h, w),
            sigma_s.transpose((1, 0)).reshape(c, h, w),
        )

    def gaussian_field(self, z: Tensor, window_h: int, window_w: int) -> GaussianFieldParams:
        mu_c, sigma_c = self.channel_params(z)
        mu_s, sigma_s = self.spatial_params(z, window_h, window_w)
        return GaussianFieldParams(
            mu_channel=mu_c,
            sigma_channel=sigma_c,
            mu_spatial=mu_s,
            sigma_spatial=sigma_s,
            mu=mu_c + mu_s,
            sigma=T.softplus(sigma_c + sigma_s),
        )

    def soft_ambiguity_masking(self, z: Tensor, u: Tensor) -> Tensor:
        """Attend the raw features over the certainty-weighted ones.

        Query comes from Z, Key/Value from (1-U) (x) Z, so positions the
        variance marks as ambiguous contribute little to the output.
        """
        c, h, w = z.shape
        certain = (1.0 - u) * z
        tq = z.reshape(c, h * w).transpose((1, 0))
        tkv = certain.reshape(c, h * w).transpose((1, 0))
        p = self.params
        q = tq @ p["uncert.mask.wq"] + p["uncert.mask.wq_b"]
        k = tkv @ p["uncert.mask.wk"] + p["uncert.mask.wk_b"]
        v = tkv @ p["uncert.mask.wv"] + p["uncert.mask.wv_b"]
        scores = (q @ k.transpose((1, 0))) * (1.0 / np.sqrt(c)) + p["uncert.mask.attn_bias"]
        attn = T.softmax_lastdim(scores)
        return (attn @ v).transpose((1, 0)).reshape(c, h, w)


def sample_distribution(params: GaussianFieldParams, k: int, rng_seed: int) -> SampleBatch:
    """Draw k reparameterized maps mu + eps (x) sigma, eps ~ N(0, I).

    The draw is deterministic given the seed (counter-based Philox
    generator), and gradients flow to both mu and sigma.
    """
    if k < 1:
        raise ParameterError(f"sample count must be >= 1, got {k}")
    rng = np.random.Generator(np.random.Philox(key=rng_seed))
    eps = rng.standard_normal((k,) + params.mu.shape)
    return SampleBatch(S=params.mu + Tensor(eps) * params.sigma, seed=rng_seed)


def uncertainty_from_sigma(params: GaussianFieldParams) -> UncertaintyMap:
    """Min-max normalize sigma per channel over spatial positions."""
    c, h, w = params.sigma.shape
    flat = params.sigma.reshape(c, h * w)
    hi = T.max_lastdim(flat).reshape(c, 1)
    lo = -T.max_lastdim(-flat).reshape(c, 1)
    u = ((flat - lo) / (hi - lo + 1e-8)).reshape(c, h, w)
    return UncertaintyMap(U=u, U_spatial=u.data.mean(axis=0))


def reweight_cam(cam_stack: Tensor, lam: float) -> tuple[Tensor, np.ndarray]:
    """Keep only strong-confidence activations.

    Returns the reweighted stack (activations at or below lam zeroed) and
    the foreground/background map marking pixels where any class survives.
    """
    if not 0.0 < lam < 1.0:
        raise ParameterError(f"confidence threshold must lie in (0, 1), got {lam}")
    keep = (cam_stack.data > lam).astype(np.float64)
    reweighted = cam_stack * Tensor(keep)
    fg = (reweighted.data > 0).any(axis=0).astype(np.int64)
    return reweighted, fg


def kl_regularizer(params: GaussianFieldParams) -> Tensor:
    """Mean per-coordinate KL from N(mu, sigma^2) to the standard normal."""
    var = params.sigma * params.sigma
    return 0.5 * (params.mu * params.mu + var - T.log(var) - 1.0).mean()


def distribution_loss(samples: SampleBatch, fg_map: np.ndarray, params: GaussianFieldParams) -> Tensor:
    """Fit the sample mean to the confident foreground map, plus the KL pull.

    Samples are averaged over the draw and channel axes and squashed to a
    per-pixel probability, which is scored against the binary map with
    cross-entropy (the finite part of the divergence to a hard target).
    """
    fg = np.asarray(fg_map, dtype=np.float64)
    if fg.shape != samples.S.shape[2:]:
        raise ParameterError(
            f"foreground map {fg.shape} does not match sample grid {samples.S.shape[2:]}"
        )
    if not np.isin(fg, (0.0, 1.0)).all():
        raise ParameterError("foreground map must be binary")
    s_dis = T.sigmoid(samples.S.mean(axis=(0, 1)))
    pos = Tensor(fg) * T.log(T.clamp_min(s_dis, 1e-12))
    neg = Tensor(1.0 - fg) * T.log(T.clamp_min(1.0 - s_dis, 1e-12))
    bce = -(pos + neg).mean()
    return bce + kl_regularizer(params)
