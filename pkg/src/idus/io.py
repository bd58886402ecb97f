"""Image, label and dataset-manifest files."""

from __future__ import annotations

import json
import subprocess
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .preprocess import UNLABELED, ImageRecord, preprocess

MANIFEST_SCHEMA_VERSION = 1
ARTIFACT_VERSION = "0.1.0"

# class colors in display order, unlabeled (black) last
CLASS_COLORS = [
    (0, 0, 255),  # blue
    (0, 160, 0),  # green
    (0, 255, 255),  # cyan
    (255, 0, 0),  # red
    (128, 0, 128),  # purple
    (255, 215, 0),  # gold
    (128, 128, 128),  # gray
]
UNLABELED_COLOR = (0, 0, 0)


def palette(n_classes: int) -> List[tuple]:
    """``n_classes`` class colors followed by black for unlabeled pixels."""
    colors = list(CLASS_COLORS)
    rng = np.random.default_rng(12345)
    while len(colors) < n_classes:
        c = tuple(int(v) for v in rng.integers(40, 256, size=3))
        if c not in colors:
            colors.append(c)
    return colors[:n_classes] + [UNLABELED_COLOR]


def colorize(label_map, n_classes: int) -> np.ndarray:
    lab = np.asarray(label_map)
    pal = np.array(palette(n_classes), dtype=np.uint8)
    idx = np.where(lab == UNLABELED, n_classes, lab)
    if idx.max() > n_classes:
        raise ValueError(f"label codes exceed n_classes={n_classes}")
    return pal[idx]


def write_image(path, img: np.ndarray) -> Path:
    """Raw little-endian float32 plus a JSON sidecar {height, width}."""
    path = Path(path).with_suffix(".f32")
    a = np.ascontiguousarray(img, dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    a.tofile(path)
    path.with_suffix(".json").write_text(json.dumps({"height": a.shape[0], "width": a.shape[1]}))
    return path


def read_image(path) -> np.ndarray:
    """Grayscale PNG (8 or 16 bit) or raw float32 with its sidecar, as float64."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        with Image.open(path) as im:
            a = np.array(im)
        if a.ndim == 3:
            raise ValueError(f"{path}: expected a single-channel image")
        return a.astype(np.float64)
    meta = json.loads(path.with_suffix(".json").read_text())
    a = np.fromfile(path, dtype="<f4")
    if a.size != meta["height"] * meta["width"]:
        raise ValueError(f"{path}: {a.size} values do not fit {meta['height']}x{meta['width']}")
    return a.reshape(meta["height"], meta["width"]).astype(np.float64)


def write_labels(path, labels: np.ndarray) -> Path:
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() > UNLABELED:
        raise ValueError("label codes must fit in 8 bits")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(lab.astype(np.uint8)).save(path)
    return path


def read_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValueError(f"{path}: label maps must be 8-bit single-channel")
        return np.array(im).astype(np.int64)


def write_color(path, label_map, n_classes: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(colorize(label_map, n_classes)).save(path)
    return path


def write_dataset(records_raw: Sequence[tuple], out_dir, extra: Optional[dict] = None) -> Path:
    """Write (source_id, raw image, truth or None, labels or None) tuples and the manifest."""
    out = Path(out_dir)
    entries = []
    for sid, raw, truth, labels in records_raw:
        e = {"source_id": sid, "image_path": str(write_image(out / "images" / sid, raw).relative_to(out))}
        if labels is not None:
            e["label_path"] = str(write_labels(out / "labels" / f"{sid}.png", labels).relative_to(out))
        if truth is not None:
            e["truth_path"] = str(write_labels(out / "truth" / f"{sid}.png", truth).relative_to(out))
        entries.append(e)
    path = out / "manifest.json"
    path.write_text(json.dumps({"schema_version": MANIFEST_SCHEMA_VERSION, **(extra or {}), "images": entries}, indent=2))
    return path


def read_manifest(path) -> List[dict]:
    """Entries of a dataset manifest with paths resolved against its directory.

    Accepts a bare JSON list or an object with an ``images`` list.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    data = json.loads(path.read_text())
    entries = data["images"] if isinstance(data, dict) else data
    out = []
    for e in entries:
        if "image_path" not in e:
            raise ValueError(f"manifest entry without image_path: {e}")
        r = dict(e)
        r.setdefault("source_id", Path(e["image_path"]).stem)
        for k in ("image_path", "label_path", "truth_path"):
            if k in r:
                r[k] = str((path.parent / r[k]).resolve())
        out.append(r)
    return out


def load_dataset(path, target_side: Optional[int] = None, target_brightness: float = 0.5) -> List[ImageRecord]:
    """Read and preprocess every image listed in a manifest."""
    recs = []
    for e in read_manifest(path):
        pix = preprocess(read_image(e["image_path"]), target_side, target_brightness)
        labels = read_labels(e["label_path"]) if "label_path" in e else None
        truth = read_labels(e["truth_path"]) if "truth_path" in e else None
        if target_side is not None:
            if labels is not None and labels.shape != pix.shape:
                raise ValueError(f"{e['source_id']}: labels must match the processed image size")
            if truth is not None and truth.shape != pix.shape:
                raise ValueError(f"{e['source_id']}: truth must match the processed image size")
        recs.append(ImageRecord(pix, labels, e["source_id"], truth))
    return recs


def git_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, cwd=Path(__file__).parent, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{ARTIFACT_VERSION}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return ARTIFACT_VERSION


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"schema_version": MANIFEST_SCHEMA_VERSION, **payload}, indent=2, default=str))
    return path
