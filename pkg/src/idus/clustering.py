"""k-means with k-means++ seeding and restarts, plus two-step texton selection.

Distances are squared Euclidean throughout.  Ties in nearest-centroid
assignment go to the lowest centroid index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist


@dataclass
class ClusterModel:
    centroids: np.ndarray
    objective: float
    seed: int = 0
    history: List[float] = field(default_factory=list)
    restart_objectives: List[float] = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]

    def save(self, path) -> None:
        path = Path(path)
        self.centroids.astype("<f4").tofile(path.with_suffix(".f32"))
        meta = {"M": self.M, "d": self.d, "objective": float(self.objective), "seed": self.seed}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "ClusterModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        c = np.fromfile(path.with_suffix(".f32"), dtype="<f4").astype(np.float64)
        return cls(c.reshape(meta["M"], meta["d"]), meta["objective"], meta["seed"])


def _check_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"points must be N x d, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    return x


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 65536) -> np.ndarray:
    if x.shape[0] <= chunk:
        return cdist(x, c, "sqeuclidean")
    return np.concatenate([cdist(x[i : i + chunk], c, "sqeuclidean") for i in range(0, len(x), chunk)])


def assign_nearest(points, model_or_centroids) -> np.ndarray:
    """Index of the nearest centroid for every point (lowest index on ties)."""
    x = _check_points(points)
    c = getattr(model_or_centroids, "centroids", model_or_centroids)
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != x.shape[1]:
        raise ValueError(f"dimension mismatch: points d={x.shape[1]}, centroids {c.shape}")
    return _sq_dists(x, c).argmin(axis=1)


def _kmeans_pp(x: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx]).ravel()
    for _ in range(1, M):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt : nxt + 1]).ravel())
    return x[idx].copy()


def _lloyd(x, centroids, max_iter, tol):
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)
        obj = float(d2[np.arange(len(x)), new_labels].sum())
        history.append(obj)
        converged = labels is not None and (
            np.array_equal(new_labels, labels)
            or (len(history) > 1 and history[-2] - obj <= tol * max(history[-2], 1e-300))
        )
        labels = new_labels
        if converged:
            break
        counts = np.bincount(labels, minlength=len(centroids))
        for m in range(len(centroids)):
            if counts[m]:
                centroids[m] = x[labels == m].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            # re-seed each empty cluster at the point farthest from its own centroid
            resid = ((x - centroids[labels]) ** 2).sum(axis=1)
            taken = set()
            for m in empty:
                order = np.argsort(-resid, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                centroids[m] = x[pick]
                resid[pick] = 0.0
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    obj = float(d2[np.arange(len(x)), labels].sum())
    if obj < history[-1]:
        history.append(obj)
    return centroids, labels, obj, history


def _transfer(x, centroids, labels, history, max_moves):
    """Single-point transfers while any lowers the objective.

    Moving x from cluster a to b changes the objective by
    ``n_b/(n_b+1) |x-c_b|^2 - n_a/(n_a-1) |x-c_a|^2``; the best move is
    applied until none is negative.  Lloyd can stall where one such move
    still helps, since its seeds are data points.
    """
    M = len(centroids)
    counts = np.bincount(labels, minlength=M).astype(np.float64)
    if np.any(counts == 0):
        # duplicate points left a cluster empty; nothing to refine
        return centroids
    obj = history[-1]
    d2 = _sq_dists(x, centroids)

    def best_target(idx):
        cost = d2[idx] * (counts / (counts + 1))
        cost[np.arange(len(idx)), labels[idx]] = np.inf
        j = cost.argmin(axis=1)
        return cost[np.arange(len(idx)), j], j

    all_rows = np.arange(len(x))
    best_cost, best_j = best_target(all_rows)
    for _ in range(max_moves):
        n_own = counts[labels]
        with np.errstate(divide="ignore", invalid="ignore"):
            removal = np.where(n_own > 1, d2[all_rows, labels] * n_own / (n_own - 1), -np.inf)
        gain = removal - best_cost
        i = int(gain.argmax())
        if not gain[i] > 1e-12 * max(obj, 1e-300):
            break
        a, b = labels[i], best_j[i]
        centroids[a] = (counts[a] * centroids[a] - x[i]) / (counts[a] - 1)
        centroids[b] = (counts[b] * centroids[b] + x[i]) / (counts[b] + 1)
        counts[a] -= 1
        counts[b] += 1
        labels[i] = b
        obj -= float(gain[i])
        history.append(obj)
        # only columns a and b change; rows whose best target was a or b are redone in full
        d2[:, [a, b]] = _sq_dists(x, centroids[[a, b]])
        for col in (a, b):
            c = d2[:, col] * (counts[col] / (counts[col] + 1))
            c[labels == col] = np.inf
            better = c < best_cost
            best_cost[better], best_j[better] = c[better], col
        stale = np.flatnonzero((best_j == a) | (best_j == b) | (all_rows == i))
        best_cost[stale], best_j[stale] = best_target(stale)
    # exact means after the incremental updates
    for m in range(M):
        centroids[m] = x[labels == m].mean(axis=0)
    return centroids


def kmeans(
    points,
    M: int,
    n_init: int = 10,
    max_iter: int = 300,
    seed: int = 0,
    tol: float = 1e-6,
    refine: bool = True,
) -> Tuple[ClusterModel, np.ndarray]:
    """Lloyd's k-means, best of ``n_init`` restarts.

    Even restarts seed with k-means++, odd ones with distinct uniformly drawn
    points.  With ``refine`` each restart is polished by single-point
    transfers after Lloyd converges.  Returns the model of the restart with the lowest
    within-cluster sum of squares (earliest restart on ties) and the point
    assignments.
    """
    x = _check_points(points)
    if M < 1 or len(x) < M:
        raise ValueError(f"need N >= M >= 1, got N={len(x)}, M={M}")
    best = None
    objectives = []
    for r in range(max(1, n_init)):
        rng = np.random.default_rng([seed, r])
        # odd restarts seed uniformly: k-means++ favors outliers as seeds
        c0 = _kmeans_pp(x, M, rng) if r % 2 == 0 else x[rng.choice(len(x), size=M, replace=False)].copy()
        c, labels, obj, hist = _lloyd(x, c0, max_iter, tol)
        if refine and M > 1:
            c = _transfer(x, c, labels.copy(), hist, max_moves=len(x) * M)
            d2 = _sq_dists(x, c)
            labels = d2.argmin(axis=1)
            obj = float(d2[np.arange(len(x)), labels].sum())
            if obj < hist[-1]:
                hist.append(obj)
        objectives.append(obj)
        if best is None or obj < best[2]:
            best = (c, labels, obj, hist)
    c, labels, obj, hist = best
    return ClusterModel(c, obj, seed, hist, objectives), labels


def texton_select(
    per_image_features: Sequence[np.ndarray],
    n_local: int = 128,
    n_global: int = 128,
    seed: int = 0,
    n_init: int = 1,
    max_iter: int = 100,
) -> ClusterModel:
    """Two-step texton selection: per-image local textons, then global textons.

    Stage one clusters each image's pixel features into ``n_local`` centroids;
    stage two clusters all local centroids together into ``n_global``.
    """
    local = []
    for n, feats in enumerate(per_image_features):
        f = _check_points(feats)
        if len(f) < n_local:
            raise ValueError(f"image {n} has {len(f)} samples, fewer than n_local={n_local}")
        # a codebook: Lloyd alone is enough
        model, _ = kmeans(f, n_local, n_init=n_init, max_iter=max_iter, seed=seed + n, refine=False)
        local.append(model.centroids)
    pooled = np.concatenate(local, axis=0)
    model, _ = kmeans(pooled, n_global, n_init=n_init, max_iter=max_iter, seed=seed, refine=False)
    return model
