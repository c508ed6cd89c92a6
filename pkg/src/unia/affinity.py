"""Pairwise affinity from encoder attention and CAM refinement with it.

Attention rows are averaged into a row-stochastic relation matrix,
balanced into a doubly stochastic one by Sinkhorn iteration, and
symmetrized. Activation maps are then propagated through powers of the
resulting transition matrix (random walk) or smoothed along image
color/position structure (pixel-adaptive refinement).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParameterError, ShapeError, Tensor


@dataclass
class AffinityMatrix:
    matrix: Tensor            # [n, n], entries > 0
    row_stochastic: bool = False
    doubly_stochastic: bool = False
    symmetric: bool = False

    @property
    def data(self) -> np.ndarray:
        return self.matrix.data


def aggregate_attention(attn_blocks: list[Tensor]) -> AffinityMatrix:
    """Mean over the heads of the last two blocks -> row-stochastic [n, n]."""
    if not attn_blocks:
        raise ParameterError("need at least one attention block")
    if len(attn_blocks) < 2:
        warnings.warn("fewer than 2 attention blocks; aggregating the last block only")
        pool = attn_blocks[-1:]
    else:
        pool = attn_blocks[-2:]
    acc = pool[0].mean(axis=0)
    for block in pool[1:]:
        acc = acc + block.mean(axis=0)
    return AffinityMatrix(matrix=acc * (1.0 / len(pool)), row_stochastic=True)


def sinkhorn_normalize(
    aff: AffinityMatrix | Tensor, iters: int = 50, tol: float = 1e-6
) -> AffinityMatrix:
    """Alternate row/column normalization until balanced (or iters exhausted).

    A tol of 0 disables the convergence exit and always runs the full
    iteration budget, which keeps the op smooth for gradient checking.
    """
    x = aff.matrix if isinstance(aff, AffinityMatrix) else aff
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"Sinkhorn needs a square matrix, got {x.shape}")
    if iters < 1:
        raise ParameterError(f"iteration budget must be >= 1, got {iters}")
    x = x + 1e-8  # strict positivity keeps every scaling well-defined
    for _ in range(iters):
        x = x / x.sum(axis=1, keepdims=True)
        x = x / x.sum(axis=0, keepdims=True)
        if tol > 0:
            dev_r = np.abs(x.data.sum(axis=1) - 1.0).max()
            dev_c = np.abs(x.data.sum(axis=0) - 1.0).max()
            if dev_r < tol and dev_c < tol:
                break
    return AffinityMatrix(matrix=x, doubly_stochastic=True)


def symmetrize(aff: AffinityMatrix) -> AffinityMatrix:
    """(A + A^T) / 2; exactly symmetric since elementwise addition commutes."""
    m = aff.matrix
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"symmetrize needs a square matrix, got {m.shape}")
    sym = (m + m.transpose((1, 0))) * 0.5
    return AffinityMatrix(
        matrix=sym, doubly_stochastic=aff.doubly_stochastic, symmetric=True
    )


def renormalize_stack(stack: np.ndarray) -> np.ndarray:
    """Scale each class map back to peak 1; all-zero maps stay zero."""
    peaks = stack.max(axis=(1, 2))
    denom = np.where(peaks > 0, peaks, 1.0)
    return stack / denom[:, None, None]


def random_walk_refine(cam_stack, aff: AffinityMatrix | np.ndarray, t: int = 2) -> np.ndarray:
    """Propagate each class map through t steps of the affinity walk.

    The transition matrix is the row-normalized affinity (close to the
    identity-strength balance the doubly stochastic form already has);
    maps are re-max-normalized per class afterwards. Runs outside the
    gradient graph: refined maps only ever feed mask thresholding.
    """
    if t < 0:
        raise ParameterError(f"walk length must be >= 0, got {t}")
    cam = cam_stack.data if isinstance(cam_stack, Tensor) else np.asarray(cam_stack, float)
    a = aff.data if isinstance(aff, AffinityMatrix) else np.asarray(aff, float)
    m, h, w = cam.shape
    if a.shape != (h * w, h * w):
        raise ShapeError(f"affinity {a.shape} does not match grid {h}x{w}")
    trans = a / a.sum(axis=1, keepdims=True)
    flat = cam.reshape(m, h * w)
    for _ in range(t):
        flat = flat @ trans.T
    return renormalize_stack(flat.reshape(m, h, w))


_NEIGHBOR_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def _shifted(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Neighbor values with replicate behavior at the borders."""
    h, w = arr.shape[-2:]
    pad = max(abs(dy), abs(dx))
    width = [(0, 0)] * (arr.ndim - 2) + [(pad, pad), (pad, pad)]
    padded = np.pad(arr, width, mode="edge")
    return padded[..., pad + dy : pad + dy + h, pad + dx : pad + dx + w]


def par_weights(
    image: np.ndarray,
    sigma_rgb: float = 0.1,
    sigma_pos: float = 6.0,
    dilations: tuple[int, ...] = (1, 2, 4),
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Per-pixel neighbor weights [K, H, W] (summing to 1) and their offsets.

    The weight of a neighbor combines color proximity
    exp(-|rgb_i - rgb_j|^2 / 2 sigma_rgb^2) and spatial proximity
    exp(-|pos_i - pos_j|^2 / 2 sigma_pos^2).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"image must be [3, H, W], got {img.shape}")
    weights = []
    planes = []
    for d in dilations:
        for dy, dx in _NEIGHBOR_OFFSETS:
            nb = _shifted(img, dy * d, dx * d)
            color = np.exp(-((img - nb) ** 2).sum(axis=0) / (2.0 * sigma_rgb**2))
            pos = np.exp(-(d * d * (dy * dy + dx * dx)) / (2.0 * sigma_pos**2))
            weights.append(color * pos)
            planes.append((dy * d, dx * d))
    stack = np.stack(weights)              # [K, H, W]
    stack /= stack.sum(axis=0, keepdims=True)
    return stack, planes


def pixel_adaptive_refine(
    cam_stack,
    image: np.ndarray,
    iters: int = 10,
    sigma_rgb: float = 0.1,
    sigma_pos: float = 6.0,
    dilations: tuple[int, ...] = (1, 2, 4),
) -> np.ndarray:
    """Iterated bilateral-style smoothing of class maps along the image.

    Neighbors are the 8-neighborhoods at each dilation, weighted by
    ``par_weights``. Each iteration is a convex combination, so map
    values never leave the input range. Maps at a coarser grid are
    upsampled to the image grid (nearest) first.
    """
    cam = cam_stack.data if isinstance(cam_stack, Tensor) else np.asarray(cam_stack, float)
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    if cam.shape[1:] != (h, w):
        cam = upsample_nearest(cam, h, w)
    stack, planes = par_weights(img, sigma_rgb, sigma_pos, dilations)

    out = cam.copy()
    for _ in range(iters):
        acc = np.zeros_like(out)
        for k, (dy, dx) in enumerate(planes):
            acc += stack[k] * _shifted(out, dy, dx)
        out = acc
    return out


def upsample_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resampling of the trailing two axes."""
    h, w = arr.shape[-2:]
    iy = (np.arange(out_h) * h) // out_h
    ix = (np.arange(out_w) * w) // out_w
    return arr[..., iy[:, None], ix[None, :]]
