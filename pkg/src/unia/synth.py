"""Synthetic ambiguity benchmark.

Images are textured canvases: foreground shapes (ellipses/rectangles)
carry class-specific striped textures, and the background texture is an
interpolation toward a randomly chosen foreground texture. The ambiguity
dial controls how close that interpolation gets: at 0 the background is
maximally distinct from every class, near 1 it is nearly
indistinguishable from one of them. Ground truth masks and image-level
labels are derived from the painted shapes, so the two are consistent by
construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import netpbm
from .tensor import ParameterError

# One fixed texture signature per class (color, stripe frequency scale,
# stripe orientation, phase offset).
PALETTE = np.array(
    [
        (0.85, 0.25, 0.25),
        (0.25, 0.75, 0.30),
        (0.25, 0.35, 0.85),
        (0.80, 0.78, 0.22),
    ]
)
_CLASS_FREQ_SCALE = (1.0, 1.45, 1.9, 2.35)
_CLASS_THETA = (0.35, 1.15, 1.95, 2.75)
BACKGROUND_COLOR = np.array((0.52, 0.52, 0.52))
_BG_FREQ_SCALE = 0.65
_BG_THETA = 2.45


@dataclass
class SyntheticSpec:
    size: int = 64
    num_classes: int = 2
    base_freq: float = 5.0
    amplitude: float = 0.15
    phase: float = 0.0
    ambiguity: float = 0.6          # 0 = distinct background, 1 = clone of a class
    texture_jitter: float = 0.5     # patch-scale contrast speckle in [0, 1)
    shapes_per_image: int = 2
    seed: int = 7

    def __post_init__(self):
        if not 1 <= self.num_classes <= 4:
            raise ParameterError(f"num_classes must be in 1..4, got {self.num_classes}")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ParameterError(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        if not 0.0 <= self.texture_jitter < 1.0:
            raise ParameterError(f"texture_jitter must lie in [0, 1), got {self.texture_jitter}")
        if self.shapes_per_image < 1:
            raise ParameterError("need at least one shape per image")


def class_texture_params(spec: SyntheticSpec, label: int) -> dict:
    """Texture signature of a class label (1-based)."""
    return {
        "color": PALETTE[label - 1],
        "freq": spec.base_freq * _CLASS_FREQ_SCALE[label - 1],
        "theta": _CLASS_THETA[label - 1],
        "phase": spec.phase,
    }


def background_texture_params(spec: SyntheticSpec, toward: int) -> dict:
    """Background signature pulled ``ambiguity`` of the way toward a class."""
    target = class_texture_params(spec, toward)
    d = spec.ambiguity
    return {
        "color": (1 - d) * BACKGROUND_COLOR + d * target["color"],
        "freq": (1 - d) * spec.base_freq * _BG_FREQ_SCALE + d * target["freq"],
        "theta": (1 - d) * _BG_THETA + d * target["theta"],
        "phase": (1 - d) * (spec.phase + 1.3) + d * target["phase"],
    }


def render_texture(params: dict, size: int, amplitude: float) -> np.ndarray:
    """Striped texture [3, size, size] with values in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    carrier = np.sin(
        2 * np.pi * params["freq"] * (xx * np.cos(params["theta"]) + yy * np.sin(params["theta"]))
        + params["phase"]
    )
    pattern = 1.0 - amplitude / 2 + (amplitude / 2) * carrier
    return np.clip(params["color"][:, None, None] * pattern[None], 0.0, 1.0)


def _paint_shape(gt: np.ndarray, rng: np.random.Generator, label: int, size: int):
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    ry = rng.uniform(size / 8, size / 4)
    rx = rng.uniform(size / 8, size / 4)
    if rng.random() < 0.5:
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    gt[inside] = label


def _contrast_speckle(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Patch-scale multiplicative contrast field in [1-j, 1+j].

    Real activation maps are patchy; this gives every image faint and
    over-strong texture cells so that raw threshold masks carry exactly
    the speckle errors spatial refinement exists to repair.
    """
    cells = max(spec.size // 8, 1)
    coarse = rng.uniform(1.0 - spec.texture_jitter, 1.0 + spec.texture_jitter, (cells, cells))
    return coarse.repeat(spec.size // cells, axis=0).repeat(spec.size // cells, axis=1)


def _paint_impostors(
    spec: SyntheticSpec, rng: np.random.Generator, img: np.ndarray, gt: np.ndarray
) -> np.ndarray:
    """Scatter isolated class-textured cells over true background.

    Impostor cells look exactly like object texture but are not objects;
    image-level labels cannot disambiguate them, so they are the
    irreducible ambiguity of the benchmark. Their count scales with the
    ambiguity dial. Isolation is what makes them recoverable: spatial
    refinement can erode a lone cell but not a contiguous shape.
    """
    size = spec.size
    cell = 8
    cells = size // cell
    count = rng.binomial(cells * cells, 0.15 * spec.ambiguity)
    for _ in range(count):
        cy, cx = rng.integers(0, cells, size=2)
        ys, xs = slice(cy * cell, (cy + 1) * cell), slice(cx * cell, (cx + 1) * cell)
        if (gt[ys, xs] != 0).any():
            continue
        label = int(rng.integers(1, spec.num_classes + 1))
        tex = render_texture(class_texture_params(spec, label), size, spec.amplitude)
        img[:, ys, xs] = tex[:, ys, xs]
    return img


def generate_sample(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (image [3,S,S] float in [0,1], gt [S,S] int) pair."""
    size = spec.size
    gt = np.zeros((size, size), dtype=np.int64)
    # 1..shapes_per_image shapes: the single-class images are where
    # image-level supervision teaches localization.
    count = int(rng.integers(1, spec.shapes_per_image + 1))
    labels = rng.integers(1, spec.num_classes + 1, size=count)
    for label in labels:
        _paint_shape(gt, rng, int(label), size)

    # The background mimics a class drawn over all labels, present or not:
    # absent-class mimicry is what makes the texture family learnable at
    # all, while present-class mimicry creates the ambiguous images.
    toward = int(rng.integers(1, spec.num_classes + 1))
    img = render_texture(background_texture_params(spec, toward), size, spec.amplitude)
    for label in np.unique(gt[gt > 0]):
        tex = render_texture(class_texture_params(spec, int(label)), size, spec.amplitude)
        img = np.where((gt == label)[None], tex, img)
    img = _paint_impostors(spec, rng, img, gt)
    speckle = _contrast_speckle(spec, rng)
    mean_color = img.mean(axis=(1, 2), keepdims=True)
    img = mean_color + (img - mean_color) * speckle[None]
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0), gt


def generate_dataset(spec: SyntheticSpec, count: int, out_dir: str) -> dict:
    """Write images/, gt/, and labels.json under out_dir; returns the labels."""
    if count < 1:
        raise ParameterError(f"dataset size must be >= 1, got {count}")
    img_dir = os.path.join(out_dir, "images")
    gt_dir = os.path.join(out_dir, "gt")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(gt_dir, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    labels: dict[str, list[int]] = {}
    for i in range(count):
        name = f"img_{i:05d}"
        img, gt = generate_sample(spec, rng)
        netpbm.write_ppm(os.path.join(img_dir, name + ".ppm"), np.round(img * 255).transpose(1, 2, 0))
        netpbm.write_pgm(os.path.join(gt_dir, name + ".pgm"), gt)
        present = set(np.unique(gt[gt > 0]).tolist())
        labels[name] = [1 if c in present else 0 for c in range(1, spec.num_classes + 1)]
    with open(os.path.join(out_dir, "labels.json"), "w") as f:
        json.dump(labels, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "spec.json"), "w") as f:
        json.dump(asdict(spec) | {"count": count}, f, indent=2, sort_keys=True)
        f.write("\n")
    return labels


@dataclass
class Sample:
    name: str
    image: np.ndarray        # [3, S, S] float64 in [0, 1]
    gt: np.ndarray           # [S, S] int64
    y: np.ndarray            # [M] multi-hot float64


def load_dataset(data_dir: str) -> list[Sample]:
    with open(os.path.join(data_dir, "labels.json")) as f:
        labels = json.load(f)
    samples = []
    for name in sorted(labels):
        img = netpbm.read_ppm(os.path.join(data_dir, "images", name + ".ppm"))
        gt = netpbm.read_pgm(os.path.join(data_dir, "gt", name + ".pgm"))
        samples.append(
            Sample(
                name=name,
                image=img.transpose(2, 0, 1).astype(np.float64) / 255.0,
                gt=gt.astype(np.int64),
                y=np.asarray(labels[name], dtype=np.float64),
            )
        )
    if not samples:
        raise ParameterError(f"no samples found under {data_dir}")
    return samples
