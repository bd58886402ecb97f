"""Iteration-0 features and the initial segment/label memories.

Backbone activations (PCA-reduced) are quantized into global textons, turned
into windowed texton histograms and concatenated with wavelet sub-band
energies.  SLIC on the result, region pooling and a global k-means give the
first pseudo-labels.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pywt
import torch
import torch.nn.functional as F
from scipy import ndimage

from .clustering import ClusterModel, assign_nearest, kmeans, texton_select
from .errors import ConfigurationError
from .segnet import ResNetEncoder, _load_pretrained, _random_encoder_init
from .superpixel import pool, slic

log = logging.getLogger(__name__)

INIT_VERSION = 1


@dataclass
class InitConfig:
    texton_side: int = 128
    pca_dims: tuple = (8, 16)
    n_local: int = 128
    n_global: int = 128
    hist_window: int = 10
    wavelet: str = "db4"
    wavelet_levels: int = 3
    wavelet_window: int = 8
    n_superpixels: int = 100
    compactness: float = 0.1
    slic_max_iter: int = 10
    n_clusters: int = 7
    kmeans_n_init: int = 10
    texton_n_init: int = 1
    pretrained_encoder: bool = True
    allow_random_encoder: bool = True
    seed: int = 0


@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # d x d' with orthonormal columns
    explained_variance: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.basis

    def inverse_transform(self, y: np.ndarray) -> np.ndarray:
        return y @ self.basis.T + self.mean


def fit_pca(x: np.ndarray, n_components: int) -> PcaModel:
    x = np.asarray(x, dtype=np.float64)
    if n_components > x.shape[1]:
        raise ValueError(f"cannot keep {n_components} components of {x.shape[1]}-d data")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    # deterministic sign: largest-magnitude loading of each component is positive
    signs = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    signs[signs == 0] = 1
    vt = vt * signs[:, None]
    var = s**2 / max(len(x) - 1, 1)
    return PcaModel(mean, vt[:n_components].T, var[:n_components])


def resize(arr: np.ndarray, size, mode: str = "bilinear") -> np.ndarray:
    """Resize an H x W x D array to ``size`` = (h, w)."""
    a = np.asarray(arr, dtype=np.float64)
    t = torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]
    kw = {"align_corners": False} if mode in ("bilinear", "bicubic") else {}
    out = F.interpolate(t, size=tuple(size), mode=mode, **kw)
    return out[0].permute(1, 2, 0).numpy()


def build_backbone(pretrained: bool = True, allow_random: bool = True, seed: int = 0):
    """ResNet-18 feature extractor; returns (module, weights tag)."""
    enc = ResNetEncoder((2, 2, 2, 2), 64)
    _random_encoder_init(enc, torch.Generator().manual_seed(seed))
    tag = "random"
    if pretrained:
        if _load_pretrained(enc):
            tag = "imagenet"
        elif not allow_random:
            raise ConfigurationError("pretrained backbone unavailable and random fallback disabled")
    return enc.eval(), tag


@torch.no_grad()
def backbone_activations(encoder, pixels: np.ndarray):
    """First and third residual block outputs as H' x W' x C arrays."""
    x = torch.from_numpy(np.asarray(pixels, dtype=np.float32))[None, None].expand(-1, 3, -1, -1)
    feats = encoder(x)
    return feats[1][0].permute(1, 2, 0).double().numpy(), feats[3][0].permute(1, 2, 0).double().numpy()


def backbone_init_features(
    images: Sequence[np.ndarray], encoder, pca_dims=(8, 16), out_side: int = 128
) -> tuple:
    """PCA-reduced, resized and concatenated backbone features for every image.

    PCA is fit once over the pooled activations of all images.  Returns
    (list of out_side x out_side x sum(pca_dims) maps, list of the two PcaModels).
    """
    acts = [backbone_activations(encoder, im) for im in images]
    pcas = []
    for j, dims in enumerate(pca_dims):
        pooled = np.concatenate([a[j].reshape(-1, a[j].shape[-1]) for a in acts])
        pcas.append(fit_pca(pooled, dims))
    maps = []
    for a in acts:
        parts = []
        for j, p in enumerate(pcas):
            h, w, c = a[j].shape
            red = p.transform(a[j].reshape(-1, c)).reshape(h, w, -1)
            parts.append(resize(red, (out_side, out_side)))
        maps.append(np.concatenate(parts, axis=2))
    return maps, pcas


def texton_histogram_map(texton_index_map, n_global: int, window: int, out_size=None) -> np.ndarray:
    """Per-pixel histogram of texton indices in a ``window`` x ``window`` neighborhood.

    Borders are zero-padded and counts divided by ``window**2``, so each
    channel lies in [0, 1].  The window spans rows ``i - (window-1)//2`` to
    ``i + window//2`` (same for columns).  Optionally resized bilinearly.
    """
    idx = np.asarray(texton_index_map)
    h, w = idx.shape
    if window < 1 or window > min(h, w):
        raise ValueError(f"window {window} does not fit a {h}x{w} map")
    if idx.min() < 0 or idx.max() >= n_global:
        raise ValueError(f"texton indices must lie in [0, {n_global})")
    onehot = np.zeros((h, w, n_global))
    onehot[np.arange(h)[:, None], np.arange(w)[None, :], idx] = 1.0
    before, after = (window - 1) // 2, window // 2
    padded = np.pad(onehot, ((before + 1, after), (before + 1, after), (0, 0)))
    ii = padded.cumsum(0).cumsum(1)
    s = ii[window:, window:] - ii[:-window, window:] - ii[window:, :-window] + ii[:-window, :-window]
    hist = s / float(window * window)
    if out_size is not None and tuple(out_size) != (h, w):
        hist = np.clip(resize(hist, out_size), 0.0, 1.0)
    return hist


def wavelet_energy(pixels, levels: int = 3, wavelet: str = "db4", window: int = 8) -> np.ndarray:
    """Smoothed absolute detail coefficients, H x W x 3*levels.

    Channels are ordered finest level first, each as (horizontal, vertical,
    diagonal) detail.  Coefficients are upsampled to image size by
    replication before the ``window`` x ``window`` box filter.
    """
    x = np.asarray(pixels, dtype=np.float64)
    h, w = x.shape
    if h % (2**levels) or w % (2**levels):
        raise ValueError(f"image size {h}x{w} not divisible by 2**{levels}")
    coeffs = pywt.wavedec2(x, wavelet, mode="periodization", level=levels)
    chans = []
    for lev in range(1, levels + 1):
        details = coeffs[levels - lev + 1]
        f = 2**lev
        for band in details:
            up = np.kron(np.abs(band), np.ones((f, f)))[:h, :w]
            chans.append(ndimage.uniform_filter(up, size=window, mode="reflect"))
    return np.stack(chans, axis=2)


def wavelet_features(pixels, levels: int = 3, wavelet: str = "db4", window: int = 8, stats=None) -> np.ndarray:
    """Standardized wavelet energies.

    ``stats`` = (mean, std) per channel, typically pooled over a dataset;
    per-image statistics are used when omitted.  Zero-variance channels are
    left centered but unscaled.
    """
    e = wavelet_energy(pixels, levels, wavelet, window)
    if stats is None:
        flat = e.reshape(-1, e.shape[2])
        stats = (flat.mean(0), flat.std(0))
    mu, sd = (np.asarray(s, dtype=np.float64) for s in stats)
    sd = np.where(sd > 0, sd, 1.0)
    return (e - mu) / sd


@dataclass
class InitResult:
    segments: List[np.ndarray]
    labels: List[np.ndarray]
    texton_model: ClusterModel
    cluster_model: ClusterModel
    pca_models: list
    encoder_weights: str
    features: Optional[List[np.ndarray]] = None
    manifest: dict = field(default_factory=dict)


def config_hash(cfg) -> str:
    blob = json.dumps(asdict(cfg) if hasattr(cfg, "__dataclass_fields__") else cfg, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def initial_features(dataset, cfg: InitConfig):
    """Steps 1-6: F0 per image (histogram channels first, then wavelet channels)."""
    images = [getattr(r, "pixels", r) for r in dataset]
    side = images[0].shape
    encoder, tag = build_backbone(cfg.pretrained_encoder, cfg.allow_random_encoder, cfg.seed)
    bb, pcas = backbone_init_features(images, encoder, cfg.pca_dims, cfg.texton_side)
    per_image = [m.reshape(-1, m.shape[-1]) for m in bb]
    textons = texton_select(per_image, cfg.n_local, cfg.n_global, seed=cfg.seed, n_init=cfg.texton_n_init)
    energies = [wavelet_energy(im, cfg.wavelet_levels, cfg.wavelet, cfg.wavelet_window) for im in images]
    flat = np.concatenate([e.reshape(-1, e.shape[-1]) for e in energies])
    mu, sd = flat.mean(0), flat.std(0)
    sd[sd == 0] = 1.0
    feats = []
    for feat, e in zip(per_image, energies):
        tmap = assign_nearest(feat, textons).reshape(cfg.texton_side, cfg.texton_side)
        hist = texton_histogram_map(tmap, cfg.n_global, cfg.hist_window, out_size=side)
        feats.append(np.concatenate([hist, (e - mu) / sd], axis=2))
    return feats, textons, pcas, tag


def initialize(dataset, cfg: InitConfig, keep_features: bool = False, out_dir=None) -> InitResult:
    """Build F0, superpixelize it, pool and cluster into ``cfg.n_clusters`` pseudo-classes."""
    if len(dataset) == 0:
        raise ValueError("initialization needs at least one image")
    feats, textons, pcas, tag = initial_features(dataset, cfg)
    segments = [slic(f, cfg.n_superpixels, cfg.compactness, cfg.slic_max_iter) for f in feats]
    z = [pool(f, s) for f, s in zip(feats, segments)]
    model, assign = kmeans(np.concatenate(z), cfg.n_clusters, n_init=cfg.kmeans_n_init, seed=cfg.seed)
    labels, start = [], 0
    for zi in z:
        labels.append(assign[start : start + len(zi)].copy())
        start += len(zi)
    manifest = {
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "init_version": INIT_VERSION,
        "encoder_weights": tag,
        "n_images": len(dataset),
        "kmeans_objective": model.objective,
    }
    result = InitResult(segments, labels, textons, model, pcas, tag, feats if keep_features else None, manifest)
    if out_dir is not None:
        save_init(result, out_dir, feats)
    return result


def save_init(result: InitResult, out_dir, feats=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.texton_model.save(out / "textons")
    result.cluster_model.save(out / "init_clusters")
    np.savez_compressed(
        out / "memories.npz",
        **{f"seg_{i}": s for i, s in enumerate(result.segments)},
        **{f"lab_{i}": r for i, r in enumerate(result.labels)},
    )
    if feats is not None:
        np.savez_compressed(out / "f0.npz", *[f.astype(np.float32) for f in feats])
    (out / "manifest.json").write_text(json.dumps(result.manifest, indent=2))
