"""Pseudo-mask construction, mutual complementing refinement, affinity loss.

Score maps are thresholded into integer masks over {0} | {1..M} | {255}
(background, classes, ignored). Three mask sources cross-correct each
other: confident foreground from the color-refined mask fills holes in
the walk-refined one, and only labels agreed by the two CAM-derived
masks may overwrite the rest. Pixel pairs drawn from the final mask
drive a contrastive loss on the affinity matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .affinity import AffinityMatrix
from .tensor import ParameterError, Tensor

IGNORE = 255


def _is_class(mask: np.ndarray) -> np.ndarray:
    return (mask != 0) & (mask != IGNORE)


def mask_from_scores(scores, present, fg_threshold: float, bg_threshold: float) -> np.ndarray:
    """Threshold per-class score maps into a pseudo mask.

    Per pixel, the best class among those present wins if its score
    exceeds fg_threshold; scores below bg_threshold become background;
    the band in between is ignored. Ties go to the lowest class index.
    """
    if not 0.0 < bg_threshold < fg_threshold < 1.0:
        raise ParameterError(
            f"need 0 < bg < fg < 1, got bg={bg_threshold}, fg={fg_threshold}"
        )
    arr = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    classes = sorted(int(c) for c in present)
    h, w = arr.shape[1:]
    if not classes:
        return np.zeros((h, w), dtype=np.int64)
    sub = arr[[c - 1 for c in classes]]
    best = np.argmax(sub, axis=0)                   # first occurrence = lowest class
    score = np.take_along_axis(sub, best[None], axis=0)[0]
    label = np.asarray(classes, dtype=np.int64)[best]
    out = np.full((h, w), IGNORE, dtype=np.int64)
    out[score > fg_threshold] = label[score > fg_threshold]
    out[score < bg_threshold] = 0
    return out


def foreground_fill(p2: np.ndarray, p3: np.ndarray) -> np.ndarray:
    """Confident foreground of p2 wherever p3 saw background or ignored."""
    if p2.shape != p3.shape:
        raise ParameterError(f"mask shapes differ: {p2.shape} vs {p3.shape}")
    take = _is_class(p2) & ~_is_class(p3)
    return np.where(take, p2, 0)


def apply_fill(p3: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Fill labels overwrite p3; everywhere else p3 passes through."""
    if p3.shape != fill.shape:
        raise ParameterError(f"mask shapes differ: {p3.shape} vs {fill.shape}")
    return np.where(_is_class(fill), fill, p3)


def consensus_labels(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """The agreement mask: p1 where the two masks match, else 0."""
    if p1.shape != p2.shape:
        raise ParameterError(f"mask shapes differ: {p1.shape} vs {p2.shape}")
    return np.where(p1 == p2, p1, 0)


def apply_consensus(pf: np.ndarray, consensus: np.ndarray) -> np.ndarray:
    """Consensus class labels overwrite pf; everywhere else pf passes through."""
    if pf.shape != consensus.shape:
        raise ParameterError(f"mask shapes differ: {pf.shape} vs {consensus.shape}")
    return np.where(_is_class(consensus), consensus, pf)


def mutual_complement_refine(p1: np.ndarray, p2: np.ndarray, p3: np.ndarray) -> np.ndarray:
    """Full chain: fill p3's misses from p2, then enforce p1/p2 consensus."""
    pf = apply_fill(p3, foreground_fill(p2, p3))
    return apply_consensus(pf, consensus_labels(p1, p2))


@dataclass
class PairSample:
    pos_pairs: np.ndarray     # [P, 2] flat-grid index pairs, same label
    neg_pairs: np.ndarray     # [N, 2] flat-grid index pairs, different labels
    pos_logits: Tensor        # [P] affinity values, gradient-connected
    neg_logits: Tensor        # [N]

    @property
    def n_pos(self) -> int:
        return len(self.pos_pairs)

    @property
    def n_neg(self) -> int:
        return len(self.neg_pairs)


def _empty_pairs() -> PairSample:
    empty = np.zeros((0, 2), dtype=np.int64)
    return PairSample(empty, empty, Tensor(np.zeros(0)), Tensor(np.zeros(0)))


def sample_pairs(
    mask: np.ndarray, aff: AffinityMatrix | Tensor, budget: int, rng_seed: int
) -> PairSample:
    """Uniformly draw ordered pixel pairs from the non-ignored grid.

    Pairs sharing a label (background included) are positives; mixed
    labels are negatives. Each pair carries its affinity logit. Fewer
    than two valid pixels yields an empty sample.
    """
    if budget < 1:
        raise ParameterError(f"pair budget must be >= 1, got {budget}")
    matrix = aff.matrix if isinstance(aff, AffinityMatrix) else aff
    n = matrix.shape[0]
    flat = np.asarray(mask).reshape(-1)
    if flat.size != n:
        raise ParameterError(f"mask size {flat.size} does not match affinity rows {n}")
    valid = np.flatnonzero(flat != IGNORE)
    if valid.size < 2:
        return _empty_pairs()

    rng = np.random.Generator(np.random.Philox(key=rng_seed))
    p = valid[rng.integers(0, valid.size, size=budget)]
    q = valid[rng.integers(0, valid.size, size=budget)]
    keep = p != q
    p, q = p[keep], q[keep]
    same = flat[p] == flat[q]
    pos = np.stack([p[same], q[same]], axis=1)
    neg = np.stack([p[~same], q[~same]], axis=1)
    pos_logits = T.gather_flat(matrix, pos[:, 0] * n + pos[:, 1])
    neg_logits = T.gather_flat(matrix, neg[:, 0] * n + neg[:, 1])
    return PairSample(pos, neg, pos_logits, neg_logits)


def contrastive_affinity_loss(pairs: PairSample, tau: float, use_log: bool = False) -> Tensor:
    """Pull same-label affinities up, push mixed-label ones down.

    The default is the plain ratio form
        L = -(1/N+) sum_q  e^{q/tau} / (e^{q/tau} + sum_k e^{k/tau}),
    bounded in [-1, 0]; ``use_log=True`` switches to the log of each
    ratio (the familiar InfoNCE shape, bounded in [0, inf)).
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if pairs.n_pos == 0:
        return Tensor(0.0)
    pos_exp = T.exp(pairs.pos_logits * (1.0 / tau))
    if pairs.n_neg:
        neg_sum = T.exp(pairs.neg_logits * (1.0 / tau)).sum()
        ratios = pos_exp / (pos_exp + neg_sum)
    else:
        ratios = pos_exp / pos_exp
    if use_log:
        return -T.log(ratios).mean()
    return -ratios.mean()
