"""The IDUS loop: train on superpixel pseudo-labels, then refresh them.

Every ``U_S`` epochs the superpixels of each image are recomputed by SLIC on
the current softmax output; every ``U_E`` epochs the softmax is pooled over
those superpixels, all regions of all images are clustered together, and the
decoder and head are re-initialized.  Pseudo pixel labels are always derived
from the two memories, never stored separately.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .clustering import kmeans
from .errors import NonFiniteLossError
from .evaluation import cm_mpa, confusion_many
from .init_features import InitConfig, InitResult, initialize
from .losses import ClassWeights, class_weights, segmentation_loss
from .preprocess import UNLABELED
from .segnet import NetworkConfig, SegNet, build, forward, load_checkpoint, reinit_decoder_head, save_checkpoint
from .superpixel import map_labels, pool, slic

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    U_E: int = 200
    U_S: int = 200
    n_iterations: int = 5
    lr0: float = 1e-4
    lr_drop: float = 0.1
    drop_every: int = 100
    batch: int = 15
    weight_decay: float = 1e-9

    @property
    def total_epochs(self) -> int:
        return self.U_E * self.n_iterations


@dataclass
class TrainerConfig:
    n_clusters: int = 7
    n_superpixels: int = 100
    compactness: float = 0.1
    slic_max_iter: int = 10
    kmeans_n_init: int = 10
    dice_smooth: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 keeps only the per-iteration checkpoints


@dataclass
class TrainState:
    model: SegNet
    segment_memory: List[np.ndarray]
    label_memory: List[np.ndarray]
    schedule: Schedule
    iteration: int = 0
    epoch: int = 0
    optimizer: Optional[torch.optim.Optimizer] = None
    scheduler: Optional[object] = None
    weights: Optional[ClassWeights] = None
    history: List[dict] = field(default_factory=list)
    kmeans_objectives: List[tuple] = field(default_factory=list)  # (accepted, all restarts) per update

    def pseudo_labels(self) -> List[np.ndarray]:
        return [map_labels(s, r) for s, r in zip(self.segment_memory, self.label_memory)]


def _pixels(dataset) -> np.ndarray:
    return np.stack([np.asarray(getattr(r, "pixels", r), dtype=np.float32) for r in dataset])


def _batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7919, epoch]).permutation(n)


def _new_optimizer(state: TrainState) -> None:
    s = state.schedule
    state.optimizer = torch.optim.Adam(state.model.parameters(), lr=s.lr0, weight_decay=s.weight_decay)
    state.scheduler = torch.optim.lr_scheduler.StepLR(state.optimizer, step_size=s.drop_every, gamma=s.lr_drop)


def train_epochs(
    state: TrainState,
    dataset,
    n_epochs: int,
    cfg: TrainerConfig,
    targets: Optional[Sequence[np.ndarray]] = None,
    run_dir=None,
) -> TrainState:
    """Minimize the pseudo-label loss for ``n_epochs`` epochs with Adam.

    The optimizer and its step schedule persist across calls until the next
    label update.  Returns the same (mutated) state.
    """
    if n_epochs <= 0:
        return state
    model = state.model
    dev = next(model.parameters()).device
    x_all = torch.from_numpy(_pixels(dataset))[:, None]
    y_np = np.stack(targets if targets is not None else state.pseudo_labels())
    y_all = torch.from_numpy(y_np.astype(np.int64))
    if state.weights is None:
        state.weights = class_weights(y_np, cfg.n_clusters)
    if state.optimizer is None:
        _new_optimizer(state)
    bs = state.schedule.batch
    model.train()
    for _ in range(n_epochs):
        order = _batch_order(cfg.seed, state.epoch, len(x_all))
        total, count = 0.0, 0
        for i in range(0, len(order), bs):
            idx = torch.from_numpy(order[i : i + bs])
            x, y = x_all[idx].to(dev), y_all[idx].to(dev)
            loss = segmentation_loss(model(x), y, state.weights, cfg.dice_smooth)
            if not torch.isfinite(loss):
                if run_dir is not None:
                    save_checkpoint(Path(run_dir) / "diagnostic.pt", model, _state_payload(state))
                raise NonFiniteLossError(f"loss became {float(loss)} at epoch {state.epoch}")
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        state.scheduler.step()
        state.epoch += 1
        state.history.append({"iteration": state.iteration, "epoch": state.epoch, "loss": total / count, "mpa": ""})
        if run_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_state(state, Path(run_dir) / "checkpoints" / f"epoch_{state.epoch:05d}.pt")
    return state


def update_segments(state: TrainState, dataset, cfg: TrainerConfig) -> TrainState:
    """Recompute superpixels by SLIC on the current softmax outputs."""
    probs = forward(state.model, _pixels(dataset))
    state.segment_memory = [slic(f, cfg.n_superpixels, cfg.compactness, cfg.slic_max_iter) for f in probs]
    state.label_memory = _relabel_after_resegment(state, probs)
    state.weights = None
    return state


def _relabel_after_resegment(state: TrainState, probs) -> List[np.ndarray]:
    # new superpixels inherit the majority of the old pixel labels they cover
    old = state.pseudo_labels() if _memories_consistent(state) else None
    out = []
    for n, seg in enumerate(state.segment_memory):
        k = int(seg.max()) + 1
        if old is None:
            out.append(np.zeros(k, dtype=np.int64))
            continue
        votes = np.zeros((k, int(old[n].max()) + 1))
        np.add.at(votes, (seg.ravel(), old[n].ravel()), 1)
        out.append(votes.argmax(1))
    return out


def _memories_consistent(state: TrainState) -> bool:
    return all(int(s.max()) + 1 == len(r) for s, r in zip(state.segment_memory, state.label_memory))


def update_labels(state: TrainState, dataset, cfg: TrainerConfig, reinit: bool = True) -> TrainState:
    """Pool softmax over current superpixels, cluster all regions, reset decoder+head."""
    probs = forward(state.model, _pixels(dataset))
    z = [pool(f, s) for f, s in zip(probs, state.segment_memory)]
    model_k, assign = kmeans(
        np.concatenate(z), cfg.n_clusters, n_init=cfg.kmeans_n_init, seed=cfg.seed + 101 * (state.iteration + 1)
    )
    labels, start = [], 0
    for zi in z:
        labels.append(assign[start : start + len(zi)].copy())
        start += len(zi)
    state.label_memory = labels
    state.weights = None
    state.kmeans_objectives.append((model_k.objective, list(model_k.restart_objectives)))
    if reinit:
        reinit_decoder_head(state.model, cfg.seed + 1000 * (state.iteration + 1))
    state.optimizer = None
    state.scheduler = None
    return state


def training_mpa(model: SegNet, dataset, n_classes: int, n_pred: int) -> Optional[float]:
    """MPA of the network argmax against partial ground truth, after column matching."""
    gts = [r.labels for r in dataset if getattr(r, "labels", None) is not None]
    if len(gts) != len(dataset) or not any(np.any(g != UNLABELED) for g in gts):
        return None
    preds = forward(model, _pixels(dataset)).argmax(-1)
    return cm_mpa(confusion_many(preds, gts, n_classes, n_pred))


def pseudo_label_mpa(state: TrainState, dataset, n_classes: int, n_pred: int) -> Optional[float]:
    gts = [getattr(r, "labels", None) for r in dataset]
    if any(g is None for g in gts):
        return None
    return cm_mpa(confusion_many(state.pseudo_labels(), gts, n_classes, n_pred))


def _state_payload(state: TrainState) -> dict:
    return {
        "iteration": state.iteration,
        "epoch": state.epoch,
        "schedule": asdict(state.schedule),
        "segments": [s.astype(np.int32) for s in state.segment_memory],
        "labels": [r.astype(np.int32) for r in state.label_memory],
        "optimizer": state.optimizer.state_dict() if state.optimizer is not None else None,
        "scheduler": state.scheduler.state_dict() if state.scheduler is not None else None,
        "history": state.history,
        "weights": asdict(state.weights) if state.weights is not None else None,
    }


def save_state(state: TrainState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, state.model, _state_payload(state))


def load_state(path) -> TrainState:
    model, p = load_checkpoint(path)
    state = TrainState(
        model=model,
        segment_memory=[np.asarray(s, dtype=np.int64) for s in p["segments"]],
        label_memory=[np.asarray(r, dtype=np.int64) for r in p["labels"]],
        schedule=Schedule(**p["schedule"]),
        iteration=p["iteration"],
        epoch=p["epoch"],
        history=list(p["history"]),
    )
    if p.get("weights") is not None:
        state.weights = ClassWeights(**{k: np.asarray(v) for k, v in p["weights"].items()})
    if p.get("optimizer") is not None:
        _new_optimizer(state)
        state.optimizer.load_state_dict(p["optimizer"])
        state.scheduler.load_state_dict(p["scheduler"])
    return state


def _check_memories(state: TrainState) -> None:
    if not _memories_consistent(state):
        raise RuntimeError("segment and label memories disagree on superpixel counts")


def write_metrics(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iteration", "epoch", "loss", "mpa"])
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in w.fieldnames})


def run(
    dataset,
    schedule: Schedule,
    net_cfg: NetworkConfig,
    cfg: TrainerConfig,
    init_cfg: Optional[InitConfig] = None,
    init: Optional[InitResult] = None,
    run_dir=None,
    n_classes: Optional[int] = None,
    resume: Optional[TrainState] = None,
) -> TrainState:
    """Initialization followed by ``schedule.n_iterations`` IDUS iterations.

    Epochs are counted globally.  After epoch ``e`` superpixels are refreshed
    when ``U_S`` divides ``e`` and pseudo-labels when ``U_E`` divides ``e``
    (segments first); neither happens after the final epoch, so the returned
    network is the one trained on the last pseudo-labels.  When ground truth is
    present the training MPA is logged at every iteration boundary.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    n_classes = n_classes or cfg.n_clusters

    if resume is not None:
        state = resume
    else:
        if init is None:
            init_cfg = init_cfg or InitConfig(
                n_superpixels=cfg.n_superpixels, n_clusters=cfg.n_clusters, seed=cfg.seed
            )
            init = initialize(dataset, init_cfg, out_dir=run_dir / "init" if run_dir else None)
        model = build(net_cfg, cfg.seed)
        state = TrainState(model, list(init.segments), list(init.labels), schedule)
        m0 = pseudo_label_mpa(state, dataset, n_classes, cfg.n_clusters)
        state.history.append({"iteration": 0, "epoch": 0, "loss": "", "mpa": "" if m0 is None else m0})
        log.info("iteration 0 (initialization) pseudo-label MPA %s", m0)

    total = schedule.total_epochs
    while state.epoch < total:
        train_epochs(state, dataset, 1, cfg, run_dir=run_dir)
        e = state.epoch
        if e % schedule.U_E == 0:
            state.iteration = e // schedule.U_E
            m = training_mpa(state.model, dataset, n_classes, cfg.n_clusters)
            state.history.append(
                {"iteration": state.iteration, "epoch": e, "loss": state.history[-1]["loss"], "mpa": "" if m is None else m}
            )
            log.info("iteration %d: loss %.4f, training MPA %s", state.iteration, state.history[-1]["loss"], m)
        if e < total:
            if e % schedule.U_S == 0:
                update_segments(state, dataset, cfg)
            if e % schedule.U_E == 0:
                update_labels(state, dataset, cfg)
                _check_memories(state)
        if run_dir is not None and e % schedule.U_E == 0:
            save_state(state, run_dir / "checkpoints" / f"iter_{state.iteration:02d}.pt")
            write_metrics(state.history, run_dir / "metrics.csv")

    if run_dir is not None:
        save_state(state, run_dir / "final.pt")
        write_metrics(state.history, run_dir / "metrics.csv")
    return state


def mpa_curve(state: TrainState) -> List[tuple]:
    """(iteration, MPA) pairs recorded at iteration boundaries."""
    out = []
    for row in state.history:
        if row.get("mpa", "") != "" and (row["iteration"] == 0 or row["epoch"] == row["iteration"] * state.schedule.U_E):
            out.append((row["iteration"], float(row["mpa"])))
    return out
