"""Static figures for run outputs (PNG, Agg backend)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_mpa_curve(curve, path) -> Path:
    """Training MPA at each iteration boundary."""
    it, m = zip(*curve)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(it, m, "o-")
    ax.set_xlabel("iteration")
    ax.set_ylabel("MPA")
    ax.set_xticks(list(it))
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_metrics(path, out) -> Path:
    rows = _rows(path)
    loss = [(int(r["epoch"]), float(r["loss"])) for r in rows if r["loss"] != ""]
    curve = [(int(r["iteration"]), float(r["mpa"])) for r in rows if r["mpa"] != ""]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    if loss:
        axes[0].plot(*zip(*loss))
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    if curve:
        axes[1].plot(*zip(*curve), "o-")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("MPA")
    axes[1].set_ylim(0, 1)
    return _save(fig, out)


def plot_sweep(path, out) -> Path:
    rows = _rows(path)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([int(r["n_clusters"]) for r in rows], [float(r["nmi"]) for r in rows], "o-")
    ax.set_xlabel("number of clusters")
    ax.set_ylabel("NMI")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    return _save(fig, out)


def plot_table(path, out) -> Path:
    """MPA against labeled subset size, one line per method, min-max band."""
    rows = _rows(path)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for method in dict.fromkeys(r["method"] for r in rows):
        sel = sorted((int(r["k"]), float(r["mpa_mean"]), float(r["mpa_min"]), float(r["mpa_max"])) for r in rows if r["method"] == method)
        k, mean, lo, hi = (np.array(v) for v in zip(*sel))
        ax.plot(k, mean, "o-", label=method)
        ax.fill_between(k, lo, hi, alpha=0.2)
    ax.set_xlabel("labeled images")
    ax.set_ylabel("MPA")
    ax.legend()
    return _save(fig, out)


def plot_trials(path, out) -> Path:
    rows = _rows(path)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar([int(r["repeat"]) for r in rows], [float(r["mpa"]) for r in rows])
    ax.set_xlabel("repeat")
    ax.set_ylabel("MPA")
    ax.set_ylim(0, 1)
    return _save(fig, out)


def plot_confusion(path, out) -> Path:
    rep = json.loads(Path(path).read_text())
    m = np.array(rep["confusion_permuted"])
    fig, ax = plt.subplots(figsize=(4, 3.6))
    im = ax.imshow(m, vmin=0, vmax=1, cmap="viridis")
    for (i, j), v in np.ndenumerate(m):
        ax.text(j, i, f"{v:.2f}", ha="center", va="center", color="w" if v < 0.5 else "k", fontsize=7)
    ax.set_xlabel("predicted (permuted)")
    ax.set_ylabel("ground truth")
    fig.colorbar(im, ax=ax)
    return _save(fig, out)


def plot_file(path, out_dir) -> Path:
    """Pick a renderer from the file's header or keys."""
    path = Path(path)
    target = Path(out_dir) / f"{path.stem}.png"
    if path.suffix == ".json":
        return plot_confusion(path, target)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if "loss" in header:
        return plot_metrics(path, target)
    if "nmi" in header:
        return plot_sweep(path, target)
    if "mpa_mean" in header:
        return plot_table(path, target)
    if "repeat" in header:
        return plot_trials(path, target)
    raise ValueError(f"do not know how to plot {path}")
