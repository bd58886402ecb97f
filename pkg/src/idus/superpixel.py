"""SLIC superpixels over D-channel feature maps, region pooling and mapping.

``pool`` averages pixel features inside each superpixel and ``map_labels``
broadcasts one label per superpixel back to its pixels; together they move
information between pixel and region level.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage


def _as_feature_map(fm) -> np.ndarray:
    f = np.asarray(fm, dtype=np.float64)
    if f.ndim == 2:
        f = f[:, :, None]
    if f.ndim != 3 or f.shape[2] < 1:
        raise ValueError(f"feature map must be H x W x D, got shape {f.shape}")
    return f


def _standardize(f: np.ndarray) -> np.ndarray:
    flat = f.reshape(-1, f.shape[2])
    mu = flat.mean(axis=0)
    sd = flat.std(axis=0)
    sd[sd == 0] = 1.0
    return (f - mu) / sd


def _grid(h: int, w: int, n: int):
    ny = max(1, min(h, int(round(np.sqrt(n * h / w)))))
    nx = max(1, min(w, n // ny))
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    return ys, xs


def _perturb_to_low_gradient(f: np.ndarray, cy: int, cx: int) -> tuple:
    h, w, _ = f.shape
    best, best_g = (cy, cx), np.inf
    for y in range(max(cy - 1, 1), min(cy + 2, h - 1)):
        for x in range(max(cx - 1, 1), min(cx + 2, w - 1)):
            g = ((f[y + 1, x] - f[y - 1, x]) ** 2).sum() + ((f[y, x + 1] - f[y, x - 1]) ** 2).sum()
            if g < best_g:
                best, best_g = (y, x), g
    return best


def slic(fm, n_segments: int = 100, compactness: float = 0.1, max_iter: int = 10) -> np.ndarray:
    """Superpixelize a feature map.

    Pixels join the center minimizing ``|f - f_c| + (compactness / S) * |xy - xy_c|``
    within a 2S x 2S window, where ``S = sqrt(H * W / n_segments)``.  Features
    are standardized per channel first.  Returns an int array of superpixel
    indices in ``[0, K)`` with every superpixel 4-connected and ``K <= n_segments``.
    """
    f = _as_feature_map(fm)
    h, w, _ = f.shape
    if n_segments < 1 or n_segments > h * w:
        raise ValueError(f"n_segments={n_segments} must lie in [1, {h * w}]")
    f = _standardize(f)
    step = np.sqrt(h * w / n_segments)
    ys, xs = _grid(h, w, n_segments)

    centers_xy = []
    for y in ys:
        for x in xs:
            centers_xy.append(_perturb_to_low_gradient(f, int(y), int(x)))
    centers_xy = np.array(centers_xy, dtype=np.float64)
    centers_f = f[centers_xy[:, 0].astype(int), centers_xy[:, 1].astype(int)].copy()

    # initial labels: the regular grid cell of each pixel
    gy = np.minimum((np.arange(h) * len(ys)) // h, len(ys) - 1)
    gx = np.minimum((np.arange(w) * len(xs)) // w, len(xs) - 1)
    labels = (gy[:, None] * len(xs) + gx[None, :]).astype(np.int64)

    yy, xx = np.mgrid[0:h, 0:w]
    r = int(np.ceil(step))
    spatial_w = compactness / step
    for _ in range(max_iter):
        dist = np.full((h, w), np.inf)
        new_labels = labels.copy()
        for k in range(len(centers_xy)):
            cy, cx = centers_xy[k]
            y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 1, h)
            x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 1, w)
            patch = f[y0:y1, x0:x1]
            df = np.sqrt(((patch - centers_f[k]) ** 2).sum(axis=2))
            ds = np.hypot(yy[y0:y1, x0:x1] - cy, xx[y0:y1, x0:x1] - cx)
            d = df + spatial_w * ds
            win = dist[y0:y1, x0:x1]
            better = d < win
            win[better] = d[better]
            new_labels[y0:y1, x0:x1][better] = k
        labels = new_labels
        n_c = len(centers_xy)
        counts = np.bincount(labels.ravel(), minlength=n_c)
        live = counts > 0
        sy = np.bincount(labels.ravel(), weights=yy.ravel(), minlength=n_c)
        sx = np.bincount(labels.ravel(), weights=xx.ravel(), minlength=n_c)
        moved = centers_xy.copy()
        moved[live, 0] = sy[live] / counts[live]
        moved[live, 1] = sx[live] / counts[live]
        sums = _bincount_channels(labels, f, n_c)
        centers_f[live] = sums[live] / counts[live, None]
        shift = np.abs(moved - centers_xy).max()
        centers_xy = moved
        if shift < 1e-3:
            break

    min_size = max(1, int((h * w / n_segments) / 16))
    return enforce_connectivity(labels, f, min_size)


def _bincount_channels(labels: np.ndarray, f: np.ndarray, k: int) -> np.ndarray:
    flat = labels.ravel()
    d = f.shape[-1]
    fr = f.reshape(-1, d)
    return np.stack([np.bincount(flat, weights=fr[:, j], minlength=k) for j in range(d)], axis=1)


def enforce_connectivity(labels: np.ndarray, f: np.ndarray, min_size: int) -> np.ndarray:
    """Make every superpixel a single 4-connected component.

    The largest component of each label survives if it has at least
    ``min_size`` pixels; every other component is merged into the adjacent
    surviving segment with the nearest mean feature.  Output indices are
    renumbered in raster order of first appearance.
    """
    h, w = labels.shape
    comp = np.zeros((h, w), dtype=np.int64)
    n_comp = 0
    four = ndimage.generate_binary_structure(2, 1)
    for lab in np.unique(labels):
        cc, n = ndimage.label(labels == lab, structure=four)
        mask = cc > 0
        comp[mask] = cc[mask] + n_comp - 1
        n_comp += n
    sizes = np.bincount(comp.ravel(), minlength=n_comp)
    comp_label = np.zeros(n_comp, dtype=np.int64)
    comp_label[comp.ravel()] = labels.ravel()

    keep = np.zeros(n_comp, dtype=bool)
    for lab in np.unique(comp_label):
        members = np.flatnonzero(comp_label == lab)
        biggest = members[np.argmax(sizes[members])]
        if sizes[biggest] >= min_size:
            keep[biggest] = True
    if not keep.any():
        keep[np.argmax(sizes)] = True

    sums = _bincount_channels(comp, f, n_comp)
    counts = sizes.astype(np.float64).copy()

    pairs = np.concatenate(
        [
            np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], 1),
            np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], 1),
        ]
    )
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    adj = [[] for _ in range(n_comp)]
    for a, b in pairs:
        adj[a].append(b)
        adj[b].append(a)

    root = np.where(keep, np.arange(n_comp), -1)
    pending = [c for c in range(n_comp) if not keep[c]]
    while pending:
        still = []
        for c in pending:
            cand = sorted({int(root[n]) for n in adj[c] if root[n] >= 0})
            if not cand:
                still.append(c)
                continue
            mean_c = sums[c] / counts[c]
            d = [np.sum((sums[r] / counts[r] - mean_c) ** 2) for r in cand]
            r = cand[int(np.argmin(d))]
            root[c] = r
            sums[r] += sums[c]
            counts[r] += counts[c]
        if len(still) == len(pending):
            raise RuntimeError("connectivity enforcement made no progress")
        pending = still

    merged = root[comp]
    _, first = np.unique(merged.ravel(), return_index=True)
    order = np.argsort(first)
    remap = np.empty(merged.max() + 1, dtype=np.int64)
    remap[np.unique(merged.ravel())[order]] = np.arange(len(order))
    return remap[merged]


def pool(fm, seg) -> np.ndarray:
    """Mean feature of every superpixel: a K x D array (row k for index k)."""
    f = _as_feature_map(fm)
    s = np.asarray(seg)
    if s.shape != f.shape[:2]:
        raise ValueError(f"segment map shape {s.shape} does not match feature map {f.shape[:2]}")
    if s.min() < 0:
        raise ValueError("segment indices must be nonnegative")
    k = int(s.max()) + 1
    counts = np.bincount(s.ravel(), minlength=k).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("segment map has empty superpixel indices")
    return _bincount_channels(s, f, k) / counts[:, None]


def map_labels(seg, region_labels) -> np.ndarray:
    """Broadcast per-superpixel labels to pixels: ``y[i] = r[seg[i]]``."""
    s = np.asarray(seg)
    r = np.asarray(region_labels)
    if r.ndim != 1 or len(r) != int(s.max()) + 1:
        raise ValueError(f"expected {int(s.max()) + 1} region labels, got {r.shape}")
    return r[s]


def save_segments(path, seg) -> None:
    """Raw little-endian int32 array with a JSON sidecar holding K and the shape."""
    path = Path(path)
    s = np.asarray(seg)
    s.astype("<i4").tofile(path.with_suffix(".i32"))
    meta = {"K": int(s.max()) + 1, "height": s.shape[0], "width": s.shape[1]}
    path.with_suffix(".json").write_text(json.dumps(meta))


def load_segments(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    s = np.fromfile(path.with_suffix(".i32"), dtype="<i4").astype(np.int64)
    return s.reshape(meta["height"], meta["width"])
