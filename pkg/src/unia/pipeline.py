"""End-to-end orchestration: model assembly, training, evaluation, inference.

A single forward pass (classification + CAM + uncertainty + affinity +
refinement + decoder) is expressed as one taped computation whose total
objective combines the classification, distribution, affinity, and
segmentation losses on a warmup schedule: the probabilistic and affinity
machinery switches on only after the warmup fraction of iterations, and
runs with both of their loss weights at zero degrade to the warmup
behavior throughout (the ablation baseline).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint, netpbm
from .affinity import (
    AffinityMatrix,
    aggregate_attention,
    pixel_adaptive_refine,
    random_walk_refine,
    sinkhorn_normalize,
    symmetrize,
    upsample_nearest,
)
from .config import Config
from .encoder import Encoder, cam, classification_loss, gmp_logits, mask_absent_classes, trunc_normal
from .metrics import ConfusionMatrix, MetricsReport
from .refine import (
    IGNORE,
    contrastive_affinity_loss,
    mask_from_scores,
    mutual_complement_refine,
    sample_pairs,
)
from .seg import CONSISTENCY_WEIGHT, SegHead, consistency_reg, seg_loss
from .synth import PALETTE, Sample, load_dataset
from .tensor import Tensor, no_grad
from .uncertainty import (
    UncertaintyNet,
    distribution_loss,
    reweight_cam,
    sample_distribution,
    uncertainty_from_sigma,
)

LOSS_COLUMNS = ("loss_cls", "loss_dis", "loss_aff", "loss_seg", "loss_reg", "loss_total")


def derive_seed(base: int, stream: int, it: int) -> int:
    """Stable per-iteration seed for the counter-based generators."""
    return (base * 1_000_003 + stream * 7_919 + it) % (2**63 - 1)


class Model:
    """Encoder trunk, classifier, probabilistic branch, and decoder."""

    def __init__(self, cfg: Config, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_config(), rng)
        self.cls_weight = trunc_normal(rng, (cfg.channels, cfg.num_classes))
        self.uncertainty = UncertaintyNet(cfg.channels, cfg.encoder_config().grid, rng)
        self.seg_head = SegHead(cfg.channels, cfg.num_classes, rng)

    def params(self) -> dict[str, Tensor]:
        merged: dict[str, Tensor] = {}
        merged.update(self.encoder.params)
        merged["cls_head.W"] = self.cls_weight
        merged.update(self.uncertainty.params)
        merged.update(self.seg_head.params)
        return merged

    def features(self, image: np.ndarray, active: bool):
        """Shared trunk: encoder output plus the stage-appropriate feature."""
        enc = self.encoder.encode_image(image)
        if not active:
            return enc, enc.Z, None, None
        gauss = self.uncertainty.gaussian_field(
            enc.Z, self.cfg.proto_window, self.cfg.proto_window
        )
        umap = uncertainty_from_sigma(gauss)
        feat = self.uncertainty.soft_ambiguity_masking(enc.Z, umap.U)
        return enc, feat, gauss, umap


def total_loss(parts: dict, cfg: Config, it: int) -> Tensor:
    """Warmup schedule: the distribution and affinity terms join late."""
    if it < 0:
        raise ValueError(f"iteration must be >= 0, got {it}")
    cls_t, seg_t, reg_t = parts["cls"], parts["seg"], parts["reg"]
    if it < cfg.warmup_iterations:
        return cls_t + cfg.gamma * seg_t + reg_t
    return (
        cls_t
        + cfg.alpha * parts["dis"]
        + cfg.beta * parts["aff"]
        + cfg.gamma * seg_t
        + reg_t
    )


@dataclass
class StepResult:
    total: Tensor
    parts: dict                  # name -> Tensor
    pseudo: np.ndarray           # [H', W'] training targets for the decoder
    raw_mask: np.ndarray         # [H', W'] plain CAM thresholding, for reference
    active: bool
    aff: AffinityMatrix | None
    umap_spatial: np.ndarray | None


def _downsample_mask(mask: np.ndarray, grid: int) -> np.ndarray:
    """Pick the label at each cell center of the finer mask."""
    h, w = mask.shape
    iy = (np.arange(grid) * h) // grid + h // (2 * grid)
    ix = (np.arange(grid) * w) // grid + w // (2 * grid)
    return mask[iy[:, None], ix[None, :]]


def build_pseudo_labels(
    cfg: Config, image: np.ndarray, cam_stack: Tensor,
    reweighted: Tensor, aff: AffinityMatrix, present: list[int],
) -> dict[str, np.ndarray]:
    """The three mask sources and their mutual-complement combination."""
    p1 = mask_from_scores(reweighted.data, present, cfg.lambda_fg, cfg.lambda_bg)
    par = pixel_adaptive_refine(reweighted.data, image, iters=cfg.par_iters)
    p2 = _downsample_mask(
        mask_from_scores(par, present, cfg.lambda_fg, cfg.lambda_bg), cam_stack.shape[1]
    )
    walked = random_walk_refine(cam_stack.data, aff, t=cfg.rw_iters)
    p3 = mask_from_scores(walked, present, cfg.lambda_fg, cfg.lambda_bg)
    return {"p1": p1, "p2": p2, "p3": p3, "pseudo": mutual_complement_refine(p1, p2, p3)}


def training_step(model: Model, sample: Sample, cfg: Config, it: int) -> StepResult:
    """One full forward pass; returns the taped objective and its parts."""
    active = it >= cfg.warmup_iterations and cfg.branches_enabled()
    enc, feat, gauss, umap = model.features(sample.image, active)
    present = (np.flatnonzero(sample.y) + 1).tolist()

    logits = gmp_logits(feat, model.cls_weight)
    l_cls = classification_loss(logits, sample.y)
    cam_stack = mask_absent_classes(cam(feat, model.cls_weight), sample.y)
    seg_out = model.seg_head.forward(feat)
    l_reg = CONSISTENCY_WEIGHT * consistency_reg(seg_out, cam_stack)

    raw_mask = mask_from_scores(cam_stack.data, present, cfg.lambda_fg, cfg.lambda_bg)
    zero = Tensor(0.0)
    l_dis, l_aff, aff = zero, zero, None
    if active:
        reweighted, fg_map = reweight_cam(cam_stack, cfg.lambda_conf)
        if cfg.alpha > 0:
            samples = sample_distribution(
                gauss, cfg.k_samples, derive_seed(cfg.seed, 1, it)
            )
            l_dis = distribution_loss(samples, fg_map, gauss)
        if cfg.beta > 0:
            agg = aggregate_attention(enc.attn)
        else:
            with no_grad():
                agg = aggregate_attention([Tensor(a.data) for a in enc.attn])
        aff = symmetrize(sinkhorn_normalize(agg, cfg.sinkhorn_iters, cfg.sinkhorn_tol))
        masks = build_pseudo_labels(cfg, sample.image, cam_stack, reweighted, aff, present)
        pseudo = masks["pseudo"]
        if cfg.beta > 0:
            pairs = sample_pairs(pseudo, aff, cfg.pair_budget, derive_seed(cfg.seed, 2, it))
            l_aff = contrastive_affinity_loss(pairs, cfg.tau, use_log=cfg.aff_log)
    else:
        pseudo = raw_mask

    l_seg = seg_loss(seg_out, pseudo)
    parts = {"cls": l_cls, "dis": l_dis, "aff": l_aff, "seg": l_seg, "reg": l_reg}
    return StepResult(
        total=total_loss(parts, cfg, it),
        parts=parts,
        pseudo=pseudo,
        raw_mask=raw_mask,
        active=active,
        aff=aff,
        umap_spatial=None if umap is None else umap.U_spatial,
    )


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-d parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def poly_lr(cfg: Config, it: int, power: float = 0.9) -> float:
    return cfg.lr * (1.0 - it / cfg.iterations) ** power


def save_checkpoint(model: Model, cfg: Config, ckpt_dir: str):
    os.makedirs(ckpt_dir, exist_ok=True)
    checkpoint.save_blob(
        model.params(),
        os.path.join(ckpt_dir, "weights.bin"),
        os.path.join(ckpt_dir, "manifest.json"),
    )
    cfg.to_json(os.path.join(ckpt_dir, "config.json"))


def load_model(ckpt_dir: str) -> tuple[Model, Config]:
    cfg = Config.load(os.path.join(ckpt_dir, "config.json"), use_env=False)
    model = Model(cfg, np.random.default_rng(cfg.seed))
    checkpoint.load_into(
        model.params(),
        os.path.join(ckpt_dir, "weights.bin"),
        os.path.join(ckpt_dir, "manifest.json"),
    )
    return model, cfg


def train(cfg: Config) -> dict:
    """Full training run; writes losses.csv and ckpt/ under cfg.out_dir."""
    samples = load_dataset(cfg.data_dir)
    os.makedirs(cfg.out_dir, exist_ok=True)
    model = Model(cfg, np.random.default_rng(cfg.seed))
    opt = AdamW(model.params(), cfg.lr, cfg.weight_decay)
    order_rng = np.random.Generator(np.random.Philox(key=derive_seed(cfg.seed, 0, 0)))
    order = order_rng.permutation(len(samples))
    csv_path = os.path.join(cfg.out_dir, "losses.csv")
    ckpt_dir = os.path.join(cfg.out_dir, "ckpt")

    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("iteration", "lr") + LOSS_COLUMNS)
        for it in range(cfg.iterations):
            if it % len(samples) == 0 and it > 0:
                order = order_rng.permutation(len(samples))
            sample = samples[order[it % len(samples)]]
            step = training_step(model, sample, cfg, it)
            values = [step.parts[k].item() for k in ("cls", "dis", "aff", "seg", "reg")]
            total = step.total.item()
            if not np.isfinite(total):
                diag = dict(zip(LOSS_COLUMNS, values + [total])) | {"iteration": it}
                with open(os.path.join(cfg.out_dir, "diagnostics.json"), "w") as d:
                    json.dump(diag, d, indent=2)
                raise RuntimeError(f"non-finite loss at iteration {it}: {diag}")
            lr = poly_lr(cfg, it)
            opt.zero_grad()
            step.total.backward()
            opt.step(lr)
            writer.writerow([it, repr(lr)] + [repr(v) for v in values] + [repr(total)])
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, cfg, ckpt_dir)
    save_checkpoint(model, cfg, ckpt_dir)
    return {"losses_csv": csv_path, "ckpt_dir": ckpt_dir}


def eval_active(cfg: Config) -> bool:
    """Whether the trained model's final-iteration path used the branches."""
    return cfg.branches_enabled() and cfg.iterations > cfg.warmup_iterations


def predict_mask(model: Model, cfg: Config, image: np.ndarray) -> np.ndarray:
    """Decoder argmax upsampled (nearest) to the image grid."""
    with no_grad():
        _, feat, _, _ = model.features(image, eval_active(cfg))
        seg_out = model.seg_head.forward(feat)
    small = np.argmax(seg_out.probs.data, axis=0)
    return upsample_nearest(small, image.shape[1], image.shape[2])


def evaluate_model(model: Model, cfg: Config, samples: list[Sample]) -> MetricsReport:
    cm = ConfusionMatrix(cfg.num_classes + 1)
    for sample in samples:
        cm.update(predict_mask(model, cfg, sample.image), sample.gt)
    return cm.report()


def evaluate(ckpt_dir: str, data_dir: str) -> MetricsReport:
    model, cfg = load_model(ckpt_dir)
    return evaluate_model(model, cfg, load_dataset(data_dir))


def pseudo_quality(model: Model, cfg: Config, samples: list[Sample]) -> dict:
    """Pseudo-label quality vs plain CAM thresholding, at image resolution."""
    cm_pseudo = ConfusionMatrix(cfg.num_classes + 1)
    cm_raw = ConfusionMatrix(cfg.num_classes + 1)
    active = eval_active(cfg)
    last_it = max(cfg.iterations - 1, cfg.warmup_iterations)
    for sample in samples:
        with no_grad():
            step = training_step(model, sample, cfg, last_it if active else 0)
        h, w = sample.gt.shape
        cm_pseudo.update(upsample_nearest(step.pseudo, h, w), sample.gt)
        cm_raw.update(upsample_nearest(step.raw_mask, h, w), sample.gt)
    return {
        "pseudo": cm_pseudo.report(),
        "raw": cm_raw.report(),
        "miou_pseudo": cm_pseudo.report().miou,
        "miou_raw": cm_raw.report().miou,
    }


def overlay_colors(num_classes: int) -> np.ndarray:
    """Background gets black; classes reuse the texture palette."""
    return np.vstack([np.zeros(3), PALETTE[:num_classes]])


def infer(ckpt_dir: str, image_path: str, out_prefix: str) -> dict:
    """Predict one image: label mask PGM plus a half-alpha color overlay PPM."""
    model, cfg = load_model(ckpt_dir)
    raw = netpbm.read_ppm(image_path)
    image = raw.transpose(2, 0, 1).astype(np.float64) / 255.0
    mask = predict_mask(model, cfg, image)
    colors = overlay_colors(cfg.num_classes)
    tinted = colors[mask].transpose(2, 0, 1)
    overlay = np.round(255 * (0.5 * image + 0.5 * tinted)).astype(np.uint8)
    mask_path = out_prefix + "_mask.pgm"
    overlay_path = out_prefix + "_overlay.ppm"
    netpbm.write_pgm(mask_path, mask)
    netpbm.write_ppm(overlay_path, overlay.transpose(1, 2, 0))
    return {"mask": mask_path, "overlay": overlay_path}
