"""Gradient integrity suite: per-op checks plus the full composite objective.

The composite check freezes every discrete byproduct of the forward pass
(pseudo labels, the confident-foreground map, pair indices, sampling
noise) at the base parameters, then finite-differences the remaining
smooth objective  L_cls + alpha L_dis + beta L_aff + gamma L_seg  with
respect to every model parameter.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .affinity import aggregate_attention, sinkhorn_normalize, symmetrize
from .config import Config
from .encoder import cam, classification_loss, gmp_logits, mask_absent_classes
from .pipeline import Model, build_pseudo_labels
from .refine import contrastive_affinity_loss, sample_pairs
from .seg import seg_loss
from .tensor import Tensor, grad_check
from .uncertainty import distribution_loss, reweight_cam, sample_distribution


def op_checks(seed: int = 0) -> list[tuple[str, float]]:
    """Quick finite-difference sweep over every differentiable primitive."""
    rng = np.random.default_rng(seed)

    def rand(shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    w34 = Tensor(rng.standard_normal((3, 4)))
    w42 = Tensor(rng.standard_normal((4, 2)))
    w24 = Tensor(rng.standard_normal((2, 4)))
    w246 = Tensor(rng.standard_normal((2, 4, 6)))
    cases = [
        ("matmul", lambda x: ((x @ w42) * (x @ w42)).sum(), rand((3, 4))),
        ("softmax_lastdim", lambda x: (T.softmax_lastdim(x, 0.7) * w34).sum(), rand((3, 4))),
        ("window_max_pool", lambda x: (T.window_max_pool(x, 2, 3) * w24).sum(), rand((2, 4, 6))),
        ("add", lambda x: ((x + w34) * w34).sum(), rand((3, 4))),
        ("mul", lambda x: ((x * w34) * w34).sum(), rand((3, 4))),
        ("div", lambda x: ((x / T.exp(w34)) * w34).sum(), rand((3, 4))),
        ("relu", lambda x: (T.relu(x) * w34).sum(), rand((3, 4))),
        ("sigmoid", lambda x: (T.sigmoid(x) * w34).sum(), rand((3, 4))),
        ("softplus", lambda x: (T.softplus(x) * w34).sum(), rand((3, 4))),
        ("exp", lambda x: (T.exp(x) * w34).sum(), rand((3, 4))),
        ("log", lambda x: (T.log(T.exp(x)) * w34).sum(), rand((3, 4))),
        ("mean", lambda x: (x.mean(axis=1) ** 2).sum(), rand((3, 4))),
        ("sum", lambda x: (x.sum(axis=0) ** 2).sum(), rand((3, 4))),
        ("max_lastdim", lambda x: (T.max_lastdim(x) ** 2).sum(), rand((3, 4))),
        ("gather_flat", lambda x: (T.gather_flat(x, [5, 1, 1]) ** 2).sum(), rand((3, 4))),
        ("pad2d", lambda x: (T.pad2d(x, 1, 1, 2, 0) ** 2).sum(), rand((3, 4))),
        ("reshape_transpose", lambda x: (x.reshape(4, 3).transpose((1, 0)) * w34).sum(),
         rand((3, 4))),
        ("abs", lambda x: (T.absolute(x) * w34).sum(), rand((3, 4))),
        ("clamp_min", lambda x: (T.clamp_min(x, 0.2) * w34).sum(), rand((3, 4))),
        ("batched_matmul", lambda x: ((x @ x.transpose((0, 2, 1))) ** 2).sum(), rand((2, 4, 6))),
    ]
    return [(name, grad_check(f, x, h=1e-5)) for name, f, x in cases]


def composite_config() -> Config:
    """Toy geometry for the composite check: 4x4 grid (16 tokens), C=8, M=2."""
    return Config(
        image_size=16,
        patch_size=4,
        channels=8,
        blocks=2,
        heads=2,
        num_classes=2,
        k_samples=3,
        proto_window=2,
        sinkhorn_iters=12,
        sinkhorn_tol=0.0,
        pair_budget=64,
        iterations=10,
        warmup_frac=0.0,
    )


def composite_check(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Finite-difference error of the full objective, per parameter tensor."""
    cfg = composite_config()
    model = Model(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    image = rng.random((3, cfg.image_size, cfg.image_size))
    y = np.ones(cfg.num_classes)
    present = [1, 2]
    noise_seed, pair_seed = 101, 202

    # Freeze the discrete byproducts at the base parameters.
    with T.no_grad():
        enc, feat, gauss, _ = model.features(image, active=True)
        cam_stack = mask_absent_classes(cam(feat, model.cls_weight), y)
        reweighted, fg_map = reweight_cam(cam_stack, cfg.lambda_conf)
        agg = aggregate_attention(enc.attn)
        aff = symmetrize(sinkhorn_normalize(agg, cfg.sinkhorn_iters, cfg.sinkhorn_tol))
        pseudo = build_pseudo_labels(cfg, image, cam_stack, reweighted, aff, present)["pseudo"]

    def objective(_unused: Tensor) -> Tensor:
        enc, feat, gauss, _ = model.features(image, active=True)
        l_cls = classification_loss(gmp_logits(feat, model.cls_weight), y)
        samples = sample_distribution(gauss, cfg.k_samples, noise_seed)
        l_dis = distribution_loss(samples, fg_map, gauss)
        agg = aggregate_attention(enc.attn)
        aff = symmetrize(sinkhorn_normalize(agg, cfg.sinkhorn_iters, cfg.sinkhorn_tol))
        pairs = sample_pairs(pseudo, aff, cfg.pair_budget, pair_seed)
        l_aff = contrastive_affinity_loss(pairs, cfg.tau)
        l_seg = seg_loss(model.seg_head.forward(feat), pseudo)
        return l_cls + cfg.alpha * l_dis + cfg.beta * l_aff + cfg.gamma * l_seg

    return {name: grad_check(objective, p, h=h) for name, p in model.params().items()}
