"""Image conditioning: area downsampling, Schlick tone mapping, histogram
equalization and per-image standardization.

The full pipeline turns a nonnegative magnitude image into the zero-mean,
unit-variance array the network and the initialization consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateInputError

UNLABELED = 255
N_LEVELS = 256


@dataclass
class ImageRecord:
    """A preprocessed grayscale image with optional partial labels.

    ``labels`` uses ``UNLABELED`` for pixels without annotation. ``truth`` is
    only populated by the synthetic generator and holds the complete class map.
    """

    pixels: np.ndarray
    labels: Optional[np.ndarray] = None
    source_id: str = ""
    truth: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels is not None and self.labels.shape != self.pixels.shape:
            raise ValueError(
                f"label shape {self.labels.shape} does not match image shape {self.pixels.shape}"
            )

    @property
    def shape(self):
        return self.pixels.shape


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells over each output cell's footprint."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), min(int(np.ceil(hi)), n_in)
        for j in range(j0, j1):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / w.sum(axis=1, keepdims=True)


def downsample(img: np.ndarray, target_side: int) -> np.ndarray:
    """Area-average ``img`` to ``target_side`` x ``target_side``.

    Each output pixel is the mean of the input over its (possibly fractional)
    footprint, which is the anti-aliased "area" interpolation.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    if target_side < 1 or target_side > min(h, w):
        raise ValueError(f"target side {target_side} exceeds input dimensions {h}x{w}")
    if (h, w) == (target_side, target_side):
        return img.copy()
    return _area_weights(h, target_side) @ img @ _area_weights(w, target_side).T


def _schlick(xn: np.ndarray, p: float) -> np.ndarray:
    return p * xn / (p * xn - xn + 1.0)


def schlick_tonemap(img: np.ndarray, target_brightness: float = 0.5, tol: float = 1e-3):
    """Map magnitudes to [0, 1] with Schlick's rational operator.

    The operator ``p*x / (p*x - x + 1)`` is applied to ``x / max(x)``; ``p`` is
    found by bisection in log space so that the output mean hits
    ``target_brightness``.  Returns the mapped image.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty image")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise ValueError("magnitudes must be finite and nonnegative")
    peak = x.max()
    if peak <= 0:
        raise DegenerateInputError("all-zero image cannot be tone mapped")
    xn = x / peak

    lo, hi = np.log(1e-6), np.log(1e6)
    if _schlick(xn, np.exp(hi)).mean() < target_brightness - tol or (
        _schlick(xn, np.exp(lo)).mean() > target_brightness + tol
    ):
        raise DegenerateInputError(
            f"target brightness {target_brightness} unreachable for this image"
        )
    # mean brightness is increasing in p
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        m = _schlick(xn, np.exp(mid)).mean()
        if abs(m - target_brightness) < tol * 0.1:
            break
        if m < target_brightness:
            lo = mid
        else:
            hi = mid
    return _schlick(xn, np.exp(mid))


def equalize_hist(img01: np.ndarray) -> np.ndarray:
    """Histogram-equalize a [0, 1] image at 8-bit depth.

    Values are quantized to 256 levels and remapped through the cumulative
    histogram the same way OpenCV's ``equalizeHist`` does; the result is
    rescaled back to [0, 1].
    """
    x = np.asarray(img01, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("equalize_hist expects values in [0, 1]")
    q = np.rint(x * (N_LEVELS - 1)).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=N_LEVELS)
    first = int(np.flatnonzero(hist)[0])
    total = q.size
    if hist[first] == total:
        return q / (N_LEVELS - 1.0)
    scale = (N_LEVELS - 1.0) / (total - hist[first])
    cdf = np.cumsum(hist)
    lut = np.clip(np.rint((cdf - hist[first]) * scale), 0, N_LEVELS - 1)
    lut[:first] = 0
    return lut[q] / (N_LEVELS - 1.0)


def normalize(img: np.ndarray) -> np.ndarray:
    """Standardize to zero mean and unit standard deviation."""
    x = np.asarray(img, dtype=np.float64)
    std = x.std()
    if not std > 0:
        raise DegenerateInputError("zero-variance image cannot be normalized")
    out = (x - x.mean()) / std
    # second pass removes residual rounding in the mean
    return out - out.mean()


def preprocess(
    raw: np.ndarray, target_side: Optional[int] = None, target_brightness: float = 0.5
) -> np.ndarray:
    """Full conditioning chain: downsample, tone map, equalize, normalize."""
    x = np.asarray(raw, dtype=np.float64)
    if target_side is not None and x.shape != (target_side, target_side):
        x = downsample(x, target_side)
    return normalize(equalize_hist(schlick_tonemap(x, target_brightness)))
