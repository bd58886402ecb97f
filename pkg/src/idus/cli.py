"""Batch command line: ``idus <command> [options]``.

Every command accepts ``--preset {full,desk}``, ``--config FILE``,
``--set key=value`` (repeatable, dotted keys such as ``schedule.U_E=30``),
``--seed`` and ``--out``, and writes ``run_manifest.json`` into its output
directory.  The accelerator is chosen with the ``IDUS_DEVICE`` environment
variable.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as cfgmod
from . import io, plots
from .errors import IdusError
from .evaluation import (
    best_permutation,
    cm_mpa,
    confusion_many,
    cosegment_handcrafted,
    cosegment_idus,
    labeled_nmi,
    nmi_sweep,
)
from .idss import (
    ProbeSchedule,
    evaluate_supervised,
    finetune,
    linear_probe,
    segnet_features,
    subset_trial,
    train_supervised,
)
from .init_features import initial_features, wavelet_features
from .preprocess import UNLABELED
from .segnet import decoder_features, forward, load_checkpoint, save_checkpoint
from .synth import class_proportions, generate_raw
from .trainer import load_state, mpa_curve, run

log = logging.getLogger("idus")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=cfgmod.PRESETS, default=None)
    p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def _dataset_arg(p, required=True) -> None:
    p.add_argument("--dataset", type=Path, required=required, help="dataset manifest (file or directory)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="idus", description="Iterative deep unsupervised texture segmentation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic textured dataset")
    _common(p)

    p = sub.add_parser("train-idus", help="unsupervised iterative training")
    _common(p)
    _dataset_arg(p)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")

    p = sub.add_parser("finetune-idss", help="semi-supervised fine-tuning on labeled subsets")
    _common(p)
    _dataset_arg(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="IDUS checkpoint")
    p.add_argument("--test", type=Path, default=None, help="test manifest; default is a 7:3 split")
    p.add_argument("--sizes", type=str, default="5", help="comma-separated labeled subset sizes")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--baseline", action="store_true", help="also train from scratch on the same subsets")

    p = sub.add_parser("cosegment", help="co-segment a collection and sweep cluster counts")
    _common(p)
    _dataset_arg(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--features", choices=("wavelet", "init"))
    p.add_argument("--clusters", type=int, default=None, help="cluster count for hand-crafted maps")
    p.add_argument("--sweep", type=str, default="3:20", help="inclusive cluster-count range lo:hi, or 'none'")

    p = sub.add_parser("evaluate", help="score predicted label maps against ground truth")
    _common(p)
    p.add_argument("--pred", type=Path, required=True, help="directory of predicted code PNGs")
    p.add_argument("--gt", type=Path, required=True, help="directory of ground-truth label PNGs")
    p.add_argument("--no-permute", action="store_true", help="class codes already agree")

    p = sub.add_parser("probe", help="linear probe on frozen features")
    _common(p)
    _dataset_arg(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--features", choices=("wavelet", "init"))
    p.add_argument("--test", type=Path, default=None)
    p.add_argument("--split", type=float, default=0.7, help="training fraction when --test is absent")
    p.add_argument("--k", type=int, default=None, help="labeled subset size (default: whole training split)")
    p.add_argument("--repeats", type=int, default=1)

    p = sub.add_parser("plot", help="render metric files as images")
    _common(p)
    p.add_argument("inputs", nargs="+", type=Path, help="metrics.csv, trials CSV, nmi_sweep.csv or report.json")
    return ap


# helpers


def _out(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, command: str, cfg, started: float, **extra) -> None:
    io.write_json(
        out / "run_manifest.json",
        {
            "command": command,
            "argv": sys.argv[1:],
            "seed": cfg.seed,
            "preset": cfg.preset,
            "config_hash": cfg.hash(),
            "artifact_version": io.git_version(),
            "wall_seconds": round(time.time() - started, 3),
            **extra,
        },
    )
    cfgmod.dump(cfg, out / "config.yaml")


def _load(path, cfg):
    ds = io.load_dataset(path, cfg.side, cfg.synth.target_brightness)
    if not ds:
        raise IdusError(f"dataset {path} lists no images")
    log.info("loaded %d images from %s", len(ds), path)
    return ds


def _n_label_classes(ds, default: int) -> int:
    return _n_codes([r.labels for r in ds if r.labels is not None], default)


def _n_codes(maps, default: int) -> int:
    codes = [np.asarray(m) for m in maps]
    if not codes:
        return default
    flat = np.concatenate([c.ravel() for c in codes])
    flat = flat[flat != UNLABELED]
    return int(flat.max()) + 1 if flat.size else default


def _split(ds, frac: float, seed: int):
    if not 0.0 < frac < 1.0:
        raise IdusError("--split must lie strictly between 0 and 1")
    order = np.random.default_rng([seed, 73]).permutation(len(ds))
    n_tr = max(1, min(len(ds) - 1, int(round(frac * len(ds)))))
    return [ds[i] for i in sorted(order[:n_tr])], [ds[i] for i in sorted(order[n_tr:])]


def _feature_maps(kind: str, ds, cfg) -> List[np.ndarray]:
    if kind == "wavelet":
        i = cfg.init
        return [wavelet_features(r.pixels, i.wavelet_levels, i.wavelet, i.wavelet_window) for r in ds]
    feats, *_ = initial_features(ds, cfg.init)
    return feats


def _range(text: str):
    if text.lower() == "none":
        return None
    lo, hi = (int(v) for v in text.split(":"))
    return range(lo, hi + 1)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# commands


def cmd_synth(args, cfg) -> dict:
    out = _out(cfg)
    raws = generate_raw(cfg.synth)
    props = class_proportions([t for _, _, t, _ in raws], cfg.synth.n_classes)
    io.write_dataset(raws, out, {"n_classes": cfg.synth.n_classes, "class_proportions": props.tolist()})
    log.info("wrote %d images to %s", len(raws), out)
    return {"n_images": len(raws), "class_proportions": props.tolist()}


def cmd_train_idus(args, cfg) -> dict:
    out = _out(cfg)
    ds = _load(args.dataset, cfg)
    resume = load_state(args.resume) if args.resume else None
    n_cls = _n_label_classes(ds, cfg.trainer.n_clusters)
    state = run(ds, cfg.schedule, cfg.network, cfg.trainer, init_cfg=cfg.init, run_dir=out, n_classes=n_cls, resume=resume)
    curve = mpa_curve(state)
    if curve:
        plots.plot_mpa_curve(curve, out / "mpa_curve.png")
    return {
        "iterations": cfg.schedule.n_iterations,
        "epochs": state.epoch,
        "encoder_weights": state.model.encoder_weights,
        "mpa_curve": curve,
        "checkpoint": str(out / "final.pt"),
    }


def cmd_finetune_idss(args, cfg) -> dict:
    out = _out(cfg)
    ds = _load(args.dataset, cfg)
    if args.test:
        train, test = ds, _load(args.test, cfg)
    else:
        train, test = _split(ds, 0.7, cfg.seed)
    pretrained, _ = load_checkpoint(args.checkpoint)
    n_cls = _n_label_classes(train + test, cfg.network.n_classes)
    sizes = [int(v) for v in args.sizes.split(",")]
    table = []
    methods = {"idss": lambda sub: finetune(pretrained, sub, cfg.finetune, seed=cfg.seed, n_classes=n_cls)}
    if args.baseline:
        methods["scratch"] = lambda sub: train_supervised(cfg.network, sub, cfg.finetune, seed=cfg.seed, n_classes=n_cls)
    for k in sizes:
        for name, fit in methods.items():
            models = []

            def runner(sub, fit=fit, models=models):
                log.info("%s: training on a labeled subset of %d images", name, len(sub))
                m = fit(sub)
                models.append(m)
                return evaluate_supervised(m, test, n_cls)

            rep = subset_trial(train, k, args.repeats, cfg.seed, runner)
            rep.write(out, f"trials_{name}_k{k}")
            table.append([name, k, rep.mean, rep.min, rep.max])
            save_checkpoint(out / f"{name}_k{k}.pt", models[0])
            log.info("%s k=%d: MPA mean %.4f (min %.4f, max %.4f)", name, k, rep.mean, rep.min, rep.max)
    _write_csv(out / "mpa_table.csv", ["method", "k", "mpa_mean", "mpa_min", "mpa_max"], table)
    return {"sizes": sizes, "repeats": args.repeats, "n_test": len(test), "table": table}


def cmd_cosegment(args, cfg) -> dict:
    out = _out(cfg)
    ds = _load(args.dataset, cfg)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        n_cls = model.cfg.n_classes
        maps = cosegment_idus(lambda p: forward(model, p), ds)
        feats = [decoder_features(model, r.pixels) for r in ds]
        source = "idus"
    else:
        n_cls = args.clusters or cfg.trainer.n_clusters
        feats = _feature_maps(args.features, ds, cfg)
        t = cfg.trainer
        maps = cosegment_handcrafted(feats, n_cls, t.n_superpixels, t.compactness, t.slic_max_iter, cfg.seed, t.kmeans_n_init)
        source = args.features
    for r, m in zip(ds, maps):
        io.write_labels(out / "codes" / f"{r.source_id}.png", m)
        io.write_color(out / "maps" / f"{r.source_id}.png", m, n_cls)
    io.write_json(out / "palette.json", {"n_classes": n_cls, "colors": io.palette(n_cls), "unlabeled_index": n_cls})
    result = {"source": source, "n_classes": n_cls, "n_images": len(ds)}
    gts = [r.labels for r in ds]
    if all(g is not None for g in gts):
        result["nmi"] = labeled_nmi(maps, gts)
        counts = _range(args.sweep)
        if counts is not None:
            t = cfg.trainer
            curve = nmi_sweep(
                feats, gts, counts, n_segments=t.n_superpixels, compactness=t.compactness,
                max_iter=t.slic_max_iter, seed=cfg.seed, n_init=t.kmeans_n_init,
            )
            _write_csv(out / "nmi_sweep.csv", ["n_clusters", "nmi"], curve)
            result["sweep"] = curve
    return result


def _read_dir(d: Path):
    files = sorted(d.glob("*.png"))
    if not files:
        raise IdusError(f"no PNG label maps in {d}")
    return {f.stem: io.read_labels(f) for f in files}


def cmd_evaluate(args, cfg) -> dict:
    out = _out(cfg)
    pred, gt = _read_dir(args.pred), _read_dir(args.gt)
    keys = sorted(set(pred) & set(gt))
    if not keys:
        raise IdusError("prediction and ground-truth directories share no file names")
    missing = sorted(set(gt) - set(pred))
    if missing:
        log.warning("%d ground-truth maps have no prediction: %s", len(missing), missing[:5])
    P, G = [pred[k] for k in keys], [gt[k] for k in keys]
    n_unlab = int(sum(np.count_nonzero(g == UNLABELED) for g in G))
    log.info("%d unlabeled ground-truth pixels excluded from all metrics", n_unlab)
    C = _n_codes(G, 1)
    n_pred = max(C, int(max(p.max() for p in P)) + 1)
    cm = confusion_many(P, G, C, n_pred)
    sq = np.zeros((n_pred, n_pred))
    sq[:C] = cm.values
    perm, permuted = best_permutation(sq) if not args.no_permute else (np.arange(n_pred), sq)
    pa = np.diag(permuted)[:C].copy()
    pa[cm.zero_support] = np.nan
    report = {
        "n_images": len(keys),
        "n_classes": C,
        "n_pred_classes": n_pred,
        "unlabeled_pixels_excluded": n_unlab,
        "zero_support_classes_excluded": np.flatnonzero(cm.zero_support).tolist(),
        "permutation": perm.tolist(),
        "per_class_pa": [None if np.isnan(v) else float(v) for v in pa],
        "mpa": cm_mpa(cm, permute=not args.no_permute),
        "nmi": labeled_nmi(P, G),
        "confusion_counts": cm.counts.tolist(),
        "confusion_permuted": permuted[:C].tolist(),
    }
    io.write_json(out / "report.json", report)
    _write_csv(out / "confusion.csv", ["gt_class"] + [f"pred_{j}" for j in perm], [[i] + list(r) for i, r in enumerate(permuted[:C])])
    log.info("MPA %.4f  NMI %.4f over %d images", report["mpa"], report["nmi"], len(keys))
    return {"mpa": report["mpa"], "nmi": report["nmi"]}


def cmd_probe(args, cfg) -> dict:
    out = _out(cfg)
    ds = _load(args.dataset, cfg)
    if args.test:
        train, test = ds, _load(args.test, cfg)
    else:
        train, test = _split(ds, args.split, cfg.seed)
    n_cls = _n_label_classes(train + test, cfg.network.n_classes)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        src = segnet_features(model)
        lookup = None
    else:
        feats = _feature_maps(args.features, train + test, cfg)
        lookup = {id(r): f for r, f in zip(train + test, feats)}
    sched: ProbeSchedule = cfg.probe

    def runner(sub):
        if lookup is None:
            res = linear_probe(src, sub, test, sched, n_cls, cfg.seed)
        else:
            res = linear_probe([lookup[id(r)] for r in sub], sub, test, sched, n_cls, cfg.seed, [lookup[id(r)] for r in test])
        return res.pa, res.mpa

    k = args.k or len(train)
    rep = subset_trial(train, k, args.repeats, cfg.seed, runner)
    rep.write(out, "probe")
    log.info("probe k=%d: MPA mean %.4f (min %.4f, max %.4f)", k, rep.mean, rep.min, rep.max)
    return {"k": k, "repeats": args.repeats, "mpa_mean": rep.mean, "mpa_min": rep.min, "mpa_max": rep.max}


def cmd_plot(args, cfg) -> dict:
    out = _out(cfg)
    written = [str(plots.plot_file(p, out)) for p in args.inputs]
    return {"plots": written}


COMMANDS = {
    "synth": cmd_synth,
    "train-idus": cmd_train_idus,
    "finetune-idss": cmd_finetune_idss,
    "cosegment": cmd_cosegment,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
    "plot": cmd_plot,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    started = time.time()
    try:
        cfg = cfgmod.load(args.config, args.preset, args.overrides, args.seed, args.out)
        for attr in ("dataset", "test", "checkpoint", "resume"):
            p = getattr(args, attr, None)
            if p is not None and not Path(p).exists():
                raise IdusError(f"--{attr} path {p} does not exist")
        result = COMMANDS[args.command](args, cfg)
        _manifest(Path(cfg.out), args.command, cfg, started, result=result)
    except (IdusError, ValueError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
