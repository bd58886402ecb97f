"""Semi-supervised fine-tuning of an IDUS network and the linear-probe protocol.

Fine-tuning re-initializes the segmentation head, trains decoder and head
alone for the first ``encoder_unfreeze_epoch`` epochs, then adds the encoder
to the optimizer.  The probe fits a per-pixel linear map on frozen features.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .evaluation import mpa, per_class_pa
from .losses import class_weights, segmentation_loss
from .preprocess import UNLABELED
from .segnet import SegNet, build, decoder_features, predict_labels, reinit_head

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass
class FinetuneSchedule:
    lr0: float = 1e-4
    drop: float = 0.1
    drop_every: int = 80
    encoder_unfreeze_epoch: int = 40
    total_epochs: int = 160
    batch: int = 15
    weight_decay: float = 1e-9

    def __post_init__(self):
        if self.encoder_unfreeze_epoch >= self.total_epochs:
            raise ValueError("encoder_unfreeze_epoch must be smaller than total_epochs")


@dataclass
class ProbeSchedule:
    lr0: float = 0.01
    drop: float = 0.1
    drop_every: int = 30
    epochs: int = 90
    batch: int = 15
    weight_decay: float = 1e-9


def _stack(records):
    x = np.stack([np.asarray(r.pixels, dtype=np.float32) for r in records])
    y = np.stack([np.asarray(r.labels).astype(np.int64) for r in records])
    return torch.from_numpy(x)[:, None], torch.from_numpy(y)


def _n_classes(records, n_classes):
    if n_classes is not None:
        return n_classes
    codes = np.concatenate([np.asarray(r.labels).ravel() for r in records])
    return int(codes[codes != UNLABELED].max()) + 1


def _set_encoder_frozen(model: SegNet, frozen: bool) -> None:
    for p in model.encoder.parameters():
        p.requires_grad_(not frozen)
    model.encoder.train(not frozen)


def _fit(model, records, sched: FinetuneSchedule, seed, n_classes, unfreeze_at, dice_smooth, on_epoch_end):
    dev = next(model.parameters()).device
    x_all, y_all = _stack(records)
    weights = class_weights(y_all.numpy(), n_classes)
    head_groups = list(model.decoder.parameters()) + list(model.head.parameters())
    model.train()
    if unfreeze_at > 0:
        _set_encoder_frozen(model, True)
        opt = torch.optim.Adam(head_groups, lr=sched.lr0, weight_decay=sched.weight_decay)
    else:
        opt = torch.optim.Adam(model.parameters(), lr=sched.lr0, weight_decay=sched.weight_decay)
    step = torch.optim.lr_scheduler.StepLR(opt, step_size=sched.drop_every, gamma=sched.drop)
    for epoch in range(sched.total_epochs):
        if unfreeze_at > 0 and epoch == unfreeze_at:
            _set_encoder_frozen(model, False)
            opt.add_param_group({"params": list(model.encoder.parameters()), "lr": opt.param_groups[0]["lr"]})
        order = np.random.default_rng([seed, 4243, epoch]).permutation(len(x_all))
        for i in range(0, len(order), sched.batch):
            idx = torch.from_numpy(order[i : i + sched.batch])
            loss = segmentation_loss(model(x_all[idx].to(dev)), y_all[idx].to(dev), weights, dice_smooth)
            opt.zero_grad()
            loss.backward()
            opt.step()
        step.step()
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    _set_encoder_frozen(model, False)
    return model


def finetune(
    pretrained: SegNet,
    labeled: Sequence,
    sched: FinetuneSchedule = FinetuneSchedule(),
    seed: int = 0,
    n_classes: Optional[int] = None,
    dice_smooth: float = 1.0,
    on_epoch_end: Optional[Callable] = None,
) -> SegNet:
    """Supervised fine-tuning of a copy of an IDUS network on labeled images.

    The head is re-initialized (resized to ``n_classes`` if needed); the
    encoder stays frozen, parameters and normalization statistics alike,
    until ``sched.encoder_unfreeze_epoch``.
    """
    if len(labeled) == 0:
        raise ValueError("fine-tuning needs at least one labeled image")
    n_classes = _n_classes(labeled, n_classes)
    model = copy.deepcopy(pretrained)
    if model.head.out_channels != n_classes:
        old = model.head
        model.head = nn.Conv2d(old.in_channels, n_classes, old.kernel_size, padding=old.padding).to(old.weight.device)
        model.cfg = _with_classes(model.cfg, n_classes)
    reinit_head(model, seed)
    log.info("fine-tuning on %d labeled images; segmentation head re-initialized", len(labeled))
    return _fit(model, labeled, sched, seed, n_classes, sched.encoder_unfreeze_epoch, dice_smooth, on_epoch_end)


def _with_classes(cfg, n_classes):
    c = copy.copy(cfg)
    c.n_classes = n_classes
    return c


def train_supervised(
    net_cfg,
    labeled: Sequence,
    sched: FinetuneSchedule = FinetuneSchedule(),
    seed: int = 0,
    n_classes: Optional[int] = None,
    dice_smooth: float = 1.0,
) -> SegNet:
    """Baseline: a freshly built network trained on the labeled images, all parameters from epoch 0."""
    n_classes = _n_classes(labeled, n_classes)
    model = build(_with_classes(net_cfg, n_classes), seed)
    return _fit(model, labeled, sched, seed, n_classes, 0, dice_smooth, None)


def evaluate_supervised(model: SegNet, records: Sequence, n_classes: int):
    """Per-class pixel accuracy over labeled test pixels and their MPA."""
    preds = predict_labels(model, np.stack([r.pixels for r in records]))
    gts = np.stack([r.labels for r in records])
    pa = per_class_pa(preds, gts, n_classes)
    return pa, mpa(pa)


FeatureSource = Callable[[np.ndarray], np.ndarray]


def segnet_features(model: SegNet) -> FeatureSource:
    """Decoder-output features of a frozen network."""
    return lambda pixels: decoder_features(model, pixels)


@dataclass
class ProbeResult:
    pa: np.ndarray
    mpa: float
    classifier: nn.Module = field(repr=False, default=None)


def _features(source, records) -> np.ndarray:
    if callable(source):
        return np.stack([np.asarray(source(r.pixels), dtype=np.float32) for r in records])
    return np.stack([np.asarray(f, dtype=np.float32) for f in source])


def linear_probe(
    source,
    train_set: Sequence,
    test_set: Sequence,
    sched: ProbeSchedule = ProbeSchedule(),
    n_classes: Optional[int] = None,
    seed: int = 0,
    test_source=None,
    dice_smooth: float = 1.0,
) -> ProbeResult:
    """Fit a 1x1 convolution (one linear function per class) on frozen features.

    ``source`` is a callable mapping pixels to an H x W x D feature map, or a
    sequence of precomputed maps aligned with ``train_set`` (then
    ``test_source`` gives the test maps).  Unlabeled pixels carry no loss.
    """
    n_classes = _n_classes(train_set, n_classes)
    f_tr = _features(source, train_set)
    f_te = _features(test_source if test_source is not None else source, test_set)
    if f_tr.shape[-1] != f_te.shape[-1]:
        raise ValueError(f"feature depth mismatch: train {f_tr.shape[-1]} vs test {f_te.shape[-1]}")
    d = f_tr.shape[-1]
    x_tr = torch.from_numpy(f_tr).permute(0, 3, 1, 2).contiguous()
    y_tr = torch.from_numpy(np.stack([np.asarray(r.labels).astype(np.int64) for r in train_set]))
    weights = class_weights(y_tr.numpy(), n_classes)

    torch.manual_seed(seed)
    clf = nn.Conv2d(d, n_classes, 1)
    opt = torch.optim.Adam(clf.parameters(), lr=sched.lr0, weight_decay=sched.weight_decay)
    step = torch.optim.lr_scheduler.StepLR(opt, step_size=sched.drop_every, gamma=sched.drop)
    for epoch in range(sched.epochs):
        order = np.random.default_rng([seed, 31, epoch]).permutation(len(x_tr))
        for i in range(0, len(order), sched.batch):
            idx = torch.from_numpy(order[i : i + sched.batch])
            loss = segmentation_loss(clf(x_tr[idx]), y_tr[idx], weights, dice_smooth)
            opt.zero_grad()
            loss.backward()
            opt.step()
        step.step()

    with torch.no_grad():
        x_te = torch.from_numpy(f_te).permute(0, 3, 1, 2).contiguous()
        pred = clf(x_te).argmax(1).numpy()
    gts = np.stack([r.labels for r in test_set])
    pa = per_class_pa(pred, gts, n_classes)
    return ProbeResult(pa, mpa(pa), clf)


def subset_indices(n: int, k: int, n_repeats: int, seed: int) -> List[np.ndarray]:
    """Sorted k-subsets of range(n); repeat r depends only on (seed, r)."""
    if k > n:
        raise ValueError(f"cannot draw {k} images from a training set of {n}")
    return [np.sort(np.random.default_rng([seed, r]).choice(n, size=k, replace=False)) for r in range(n_repeats)]


@dataclass
class TrialReport:
    k: int
    subsets: List[List[int]]
    mpas: List[float]
    pas: List[List[float]]

    @property
    def mean(self) -> float:
        return float(np.mean(self.mpas))

    @property
    def min(self) -> float:
        return float(np.min(self.mpas))

    @property
    def max(self) -> float:
        return float(np.max(self.mpas))

    def summary(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "k": self.k,
            "n_repeats": len(self.mpas),
            "mpa_mean": self.mean,
            "mpa_min": self.min,
            "mpa_max": self.max,
            "subsets": self.subsets,
        }

    def write(self, out_dir, stem: str = "trials") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        n_cls = len(self.pas[0]) if self.pas else 0
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["repeat", "k", "mpa"] + [f"pa_{c}" for c in range(n_cls)])
            for r, (m, pa) in enumerate(zip(self.mpas, self.pas)):
                w.writerow([r, self.k, m] + ["" if np.isnan(v) else v for v in pa])
        (out / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2))


def subset_trial(
    train_set: Sequence,
    k_labeled: int,
    n_repeats: int,
    seed: int,
    runner: Callable[[List], tuple],
) -> TrialReport:
    """Run ``runner(subset) -> (per-class PA, MPA)`` on ``n_repeats`` random k-subsets.

    The same seed yields the same subsets, so different methods can be
    compared on identical training images.
    """
    subsets = subset_indices(len(train_set), k_labeled, n_repeats, seed)
    mpas, pas = [], []
    for idx in subsets:
        pa, m = runner([train_set[i] for i in idx])
        mpas.append(float(m))
        pas.append([float(v) for v in pa])
    return TrialReport(k_labeled, [s.tolist() for s in subsets], mpas, pas)
