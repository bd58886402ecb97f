"""Synthetic seabed-like texture mosaics.

Each image is a Voronoi mosaic whose cells carry one of a small set of
textures: sinusoidal ripples at two wavelengths, a smooth low-contrast field
and a sparse bright speckle field.  Labels cover an exact fraction of pixels,
taken from the cell interiors first, mimicking an operator who only annotates
the unambiguous parts of a scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy import ndimage

from .preprocess import UNLABELED, ImageRecord, preprocess


@dataclass
class TextureSpec:
    kind: str  # "ripple" | "smooth" | "speckle"
    wavelength: float = 8.0
    orientation: float = 0.0
    noise_std: float = 0.05
    density: float = 0.05

    def __post_init__(self):
        if self.kind not in ("ripple", "smooth", "speckle"):
            raise ValueError(f"unknown texture kind {self.kind!r}")


def default_textures() -> List[TextureSpec]:
    return [
        TextureSpec("ripple", wavelength=10.0, orientation=0.3),
        TextureSpec("ripple", wavelength=4.0, orientation=1.2),
        TextureSpec("smooth", noise_std=0.05),
        TextureSpec("speckle", density=0.08),
    ]


@dataclass
class SynthConfig:
    n_images: int = 20
    side: int = 64
    n_classes: int = 4
    textures: List[TextureSpec] = field(default_factory=default_textures)
    label_fraction: float = 0.5
    seed: int = 0
    cells_per_image: tuple = (2, 4)
    min_cell_distance: float = 20.0
    target_brightness: float = 0.5

    def __post_init__(self):
        self.textures = [t if isinstance(t, TextureSpec) else TextureSpec(**t) for t in self.textures]
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in [0, 1]")
        if self.n_classes > len(self.textures):
            raise ValueError(
                f"{self.n_classes} classes requested but only {len(self.textures)} textures configured"
            )
        if self.n_classes < 1 or self.n_images < 1 or self.side < 32:
            raise ValueError("need n_classes >= 1, n_images >= 1 and side >= 32")


def render_texture(spec: TextureSpec, side: int, rng: np.random.Generator) -> np.ndarray:
    """Render a full-frame nonnegative magnitude field for one texture."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    noise = rng.normal(size=(side, side))
    if spec.kind == "ripple":
        theta = spec.orientation + rng.uniform(-0.15, 0.15)
        phase = rng.uniform(0, 2 * np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        field_ = 0.5 + 0.4 * np.sin(2 * np.pi * u / spec.wavelength + phase)
        field_ += 0.05 * noise
    elif spec.kind == "smooth":
        field_ = 0.5 + spec.noise_std * ndimage.gaussian_filter(noise, 2.0) / 0.14
    else:
        field_ = 0.3 + 0.05 * noise
        dots = rng.random((side, side)) < spec.density
        field_ += 0.6 * ndimage.maximum_filter(dots.astype(float), size=2)
    return np.clip(field_, 0.0, None)


def _voronoi_partition(side: int, n_cells: int, min_dist: float, rng) -> np.ndarray:
    seeds: list = []
    for _ in range(1000):
        if len(seeds) == n_cells:
            break
        cand = rng.uniform(0, side, size=2)
        if all(np.hypot(*(cand - s)) >= min_dist for s in seeds):
            seeds.append(cand)
    yy, xx = np.mgrid[0:side, 0:side]
    pts = np.stack([yy, xx], -1).astype(np.float64) + 0.5
    d = np.stack([np.hypot(*(pts - s).transpose(2, 0, 1)) for s in seeds], 0)
    return d.argmin(0)


def _label_mask(cells: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Exactly floor(fraction * H * W) pixels, most interior first."""
    h, w = cells.shape
    n_keep = int(np.floor(fraction * h * w))
    boundary = np.zeros_like(cells, dtype=bool)
    boundary[:-1, :] |= cells[:-1, :] != cells[1:, :]
    boundary[1:, :] |= cells[:-1, :] != cells[1:, :]
    boundary[:, :-1] |= cells[:, :-1] != cells[:, 1:]
    boundary[:, 1:] |= cells[:, :-1] != cells[:, 1:]
    dist = ndimage.distance_transform_edt(~boundary) if boundary.any() else np.full((h, w), float(h + w))
    score = dist + rng.random((h, w)) * 1e-3
    order = np.argsort(-score.ravel(), kind="stable")
    mask = np.zeros(h * w, dtype=bool)
    mask[order[:n_keep]] = True
    return mask.reshape(h, w)


def generate_raw(cfg: SynthConfig):
    """Yield (source_id, raw magnitudes, full truth, partial labels) per image."""
    root = np.random.SeedSequence(cfg.seed)
    out = []
    for n, child in enumerate(root.spawn(cfg.n_images)):
        rng = np.random.default_rng(child)
        lo, hi = cfg.cells_per_image
        n_cells = int(rng.integers(lo, hi + 1))
        cells = _voronoi_partition(cfg.side, n_cells, cfg.min_cell_distance, rng)
        n_cells = int(cells.max()) + 1
        classes = rng.integers(0, cfg.n_classes, size=n_cells)
        truth = classes[cells].astype(np.uint8)
        raw = np.zeros((cfg.side, cfg.side))
        for c in np.unique(classes):
            tex = render_texture(cfg.textures[c], cfg.side, rng)
            raw[truth == c] = tex[truth == c]
        labels = np.full_like(truth, UNLABELED)
        mask = _label_mask(cells, cfg.label_fraction, rng)
        labels[mask] = truth[mask]
        out.append((f"synth_{n:04d}", raw, truth, labels))
    return out


def class_proportions(truth_maps, n_classes: int) -> np.ndarray:
    counts = np.zeros(n_classes)
    for t in truth_maps:
        counts += np.bincount(np.asarray(t).ravel(), minlength=n_classes)[:n_classes]
    return counts / counts.sum()


def generate_synthetic(cfg: SynthConfig) -> List[ImageRecord]:
    """Build the preprocessed synthetic dataset; deterministic in ``cfg.seed``."""
    records = []
    for source_id, raw, truth, labels in generate_raw(cfg):
        rec = ImageRecord(
            pixels=preprocess(raw, target_brightness=cfg.target_brightness),
            labels=labels,
            source_id=source_id,
            truth=truth,
            meta={"class_proportions": class_proportions([truth], cfg.n_classes).tolist()},
        )
        records.append(rec)
    return records
