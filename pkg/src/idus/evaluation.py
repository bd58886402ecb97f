"""Segmentation metrics and co-segmentation drivers.

Confusion matrices count only labeled pixels and are row-normalized by
ground-truth support.  Unsupervised predictions are matched to classes by
the column permutation that maximizes the trace.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .clustering import kmeans
from .errors import DegenerateInputError, UndefinedClassError
from .preprocess import UNLABELED
from .superpixel import map_labels, pool, slic

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # C x C' raw pixel counts
    values: np.ndarray  # row-normalized proportions; zero-support rows are all zero
    zero_support: np.ndarray  # bool per ground-truth class

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion(pred, gt, C: int, n_pred: Optional[int] = None) -> ConfusionMatrix:
    """Confusion matrix over labeled pixels (``gt != UNLABELED``)."""
    n_pred = C if n_pred is None else n_pred
    p = np.asarray(pred).ravel().astype(np.int64)
    g = np.asarray(gt).ravel().astype(np.int64)
    if p.shape != g.shape:
        raise ValueError("prediction and ground truth differ in size")
    if p.size and (p.min() < 0 or p.max() >= n_pred):
        raise ValueError(f"prediction codes must lie in [0, {n_pred})")
    labeled = g != UNLABELED
    if np.any(g[labeled] < 0) or np.any(g[labeled] >= C):
        raise ValueError(f"ground-truth codes must lie in [0, {C}) or be UNLABELED")
    counts = np.bincount(g[labeled] * n_pred + p[labeled], minlength=C * n_pred).reshape(C, n_pred)
    support = counts.sum(axis=1)
    zero = support == 0
    values = np.zeros(counts.shape)
    values[~zero] = counts[~zero] / support[~zero, None]
    return ConfusionMatrix(counts, values, zero)


def confusion_many(preds: Iterable, gts: Iterable, C: int, n_pred: Optional[int] = None) -> ConfusionMatrix:
    n_pred = C if n_pred is None else n_pred
    total = np.zeros((C, n_pred), dtype=np.int64)
    for p, g in zip(preds, gts):
        total += confusion(p, g, C, n_pred).counts
    support = total.sum(axis=1)
    zero = support == 0
    values = np.zeros(total.shape)
    values[~zero] = total[~zero] / support[~zero, None]
    return ConfusionMatrix(total, values, zero)


def _best_value(m: np.ndarray) -> float:
    r, c = linear_sum_assignment(m, maximize=True)
    return float(m[r, c].sum())


def best_permutation(cm):
    """Column permutation maximizing the trace, and the reordered matrix.

    ``perm[i]`` is the original column placed at position ``i``.  Among all
    optimal permutations the lexicographically smallest is returned.
    """
    m = np.asarray(getattr(cm, "values", cm), dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"best_permutation needs a square matrix, got {m.shape}")
    n = m.shape[0]
    target = _best_value(m)
    tol = 1e-9 * max(1.0, abs(target))
    perm: List[int] = []
    rows, cols = list(range(n)), list(range(n))
    fixed = 0.0
    for i in range(n):
        rest_rows = rows[i + 1 :]
        for j in sorted(cols):
            rest_cols = [c for c in cols if c != j]
            rest = _best_value(m[np.ix_(rest_rows, rest_cols)]) if rest_rows else 0.0
            if fixed + m[i, j] + rest >= target - tol:
                perm.append(j)
                fixed += m[i, j]
                cols = rest_cols
                break
    perm = np.array(perm)
    return perm, m[:, perm]


def mpa(values) -> float:
    """Mean of per-class pixel accuracies; NaN entries (no support) are skipped."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("mpa of an empty sequence")
    ok = ~np.isnan(v)
    if not ok.any():
        raise UndefinedClassError("no class has ground-truth support")
    if not ok.all():
        log.info("mpa: %d zero-support classes excluded", int((~ok).sum()))
    return float(v[ok].mean())


def cm_mpa(cm: ConfusionMatrix, permute: bool = True) -> float:
    """MPA of a confusion matrix, optionally after the trace-maximizing column sort."""
    c, cp = cm.values.shape
    n = max(c, cp)
    sq = np.zeros((n, n))
    sq[:c, :cp] = cm.values
    if permute:
        _, sq = best_permutation(sq)
    diag = np.diag(sq)[:c].copy()
    diag[cm.zero_support] = np.nan
    return mpa(diag)


def pixel_accuracy(pred, gt, c: int) -> float:
    """|pred == c and gt == c| / |gt == c|."""
    p = np.asarray(pred).ravel()
    g = np.asarray(gt).ravel()
    support = np.count_nonzero(g == c)
    if support == 0:
        raise UndefinedClassError(f"class {c} has no ground-truth support")
    return np.count_nonzero((p == c) & (g == c)) / support


def per_class_pa(pred, gt, C: int) -> np.ndarray:
    """Pixel accuracy for each class; NaN where the class has no support."""
    out = np.full(C, np.nan)
    for c in range(C):
        try:
            out[c] = pixel_accuracy(pred, gt, c)
        except UndefinedClassError:
            pass
    return out


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """Normalized mutual information ``I(A;B) / sqrt(H(A) H(B))`` in nats."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError("assignment lists differ in length")
    if a.size == 0:
        raise ValueError("empty assignment lists")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1)
    ha, hb = _entropy(joint.sum(1)), _entropy(joint.sum(0))
    if ha == 0 or hb == 0:
        raise DegenerateInputError("NMI undefined for a partition with a single label")
    pj = joint / joint.sum()
    pa = pj.sum(1, keepdims=True)
    pb = pj.sum(0, keepdims=True)
    nz = pj > 0
    mi = float((pj[nz] * np.log(pj[nz] / (pa @ pb)[nz])).sum())
    return float(np.clip(mi / np.sqrt(ha * hb), 0.0, 1.0))


def labeled_nmi(preds: Sequence, gts: Sequence) -> float:
    """Pixel-level NMI over labeled pixels of a whole collection."""
    p = np.concatenate([np.asarray(x).ravel() for x in preds])
    g = np.concatenate([np.asarray(x).ravel() for x in gts])
    keep = g != UNLABELED
    return nmi(p[keep], g[keep])


def cosegment_handcrafted(
    features: Sequence[np.ndarray],
    n_clusters: int,
    n_segments: int = 100,
    compactness: float = 0.1,
    max_iter: int = 10,
    seed: int = 0,
    n_init: int = 10,
    segments: Optional[Sequence[np.ndarray]] = None,
) -> List[np.ndarray]:
    """SLIC on each feature map, pool, k-means over all superpixels, map back."""
    if segments is None:
        segments = [slic(f, n_segments, compactness, max_iter) for f in features]
    z = [pool(f, s) for f, s in zip(features, segments)]
    _, assign = kmeans(np.concatenate(z), n_clusters, n_init=n_init, seed=seed)
    out, start = [], 0
    for s, zi in zip(segments, z):
        out.append(map_labels(s, assign[start : start + len(zi)]))
        start += len(zi)
    return out


def nmi_sweep(
    features: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    cluster_counts: Iterable[int] = range(3, 21),
    **slic_kw,
) -> List[tuple]:
    """NMI against ground truth for each cluster count; superpixels are computed once."""
    keys = ("n_segments", "compactness", "max_iter")
    sp = {k: slic_kw[k] for k in keys if k in slic_kw}
    segments = [slic(f, **sp) for f in features]
    rest = {k: v for k, v in slic_kw.items() if k not in keys}
    curve = []
    for k in cluster_counts:
        maps = cosegment_handcrafted(features, k, segments=segments, **rest)
        curve.append((k, labeled_nmi(maps, gts)))
    return curve


def cosegment_idus(predict: Callable[[np.ndarray], np.ndarray], images: Sequence) -> List[np.ndarray]:
    """Per-pixel argmax of the network softmax (lowest class wins ties)."""
    out = []
    for img in images:
        pixels = getattr(img, "pixels", img)
        out.append(argmax_labels(predict(pixels)))
    return out


def argmax_labels(softmax: np.ndarray) -> np.ndarray:
    return np.asarray(softmax).argmax(axis=-1)
