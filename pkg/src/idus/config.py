"""Run configuration: scale presets, YAML files and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml

from .errors import ConfigurationError
from .idss import FinetuneSchedule, ProbeSchedule
from .init_features import InitConfig
from .segnet import NetworkConfig
from .synth import SynthConfig
from .trainer import Schedule, TrainerConfig

PRESETS = ("full", "desk")
_SECTIONS = {
    "synth": SynthConfig,
    "init": InitConfig,
    "network": NetworkConfig,
    "schedule": Schedule,
    "trainer": TrainerConfig,
    "finetune": FinetuneSchedule,
    "probe": ProbeSchedule,
}


@dataclass
class RunConfig:
    preset: str = "full"
    seed: int = 0
    dataset: Optional[str] = None
    out: str = "runs/default"
    side: Optional[int] = None  # images are area-downsampled to side x side on load
    synth: SynthConfig = field(default_factory=SynthConfig)
    init: InitConfig = field(default_factory=InitConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    schedule: Schedule = field(default_factory=Schedule)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    finetune: FinetuneSchedule = field(default_factory=FinetuneSchedule)
    probe: ProbeSchedule = field(default_factory=ProbeSchedule)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        # the output location does not change results
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _full() -> dict:
    return {
        "synth": {"n_images": 113, "side": 512, "min_cell_distance": 120},
        "init": {"n_superpixels": 100, "n_clusters": 7},
        "network": {"n_classes": 7},
        "schedule": {"U_E": 200, "U_S": 200, "n_iterations": 5, "batch": 15},
        "trainer": {"n_clusters": 7, "n_superpixels": 100},
    }


def _desk() -> dict:
    # reduced encoder: one residual block per stage, same skip topology
    return {
        "synth": {"n_images": 20, "side": 64, "n_classes": 4},
        "init": {"texton_side": 16, "hist_window": 5, "n_superpixels": 32, "n_clusters": 4},
        "network": {"n_classes": 4, "encoder_layers": [1, 1, 1, 1]},
        "schedule": {"U_E": 30, "U_S": 30, "n_iterations": 3, "batch": 8},
        "trainer": {"n_clusters": 4, "n_superpixels": 32},
        "finetune": {"batch": 8},
        "probe": {"batch": 8},
    }


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {PRESETS}")
    return _full() if name == "full" else _desk()


def _merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_value(text: str) -> Any:
    """YAML scalar semantics: ``3`` -> int, ``1e-4`` -> float, ``[1,2]`` -> list."""
    v = yaml.safe_load(text)
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    return v


def parse_overrides(items: Iterable[str]) -> dict:
    tree: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = tree
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parse_value(value)
    return tree


def _build_section(cls, values: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) and k != "textures" else v for k, v in values.items()}
    try:
        return cls(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid [{name}] section: {exc}") from exc


def from_dict(tree: dict) -> RunConfig:
    unknown = set(tree) - set(_SECTIONS) - {"preset", "seed", "dataset", "out", "side"}
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {k: tree[k] for k in ("preset", "seed", "dataset", "out", "side") if k in tree}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build_section(cls, tree.get(name, {}), name)
    cfg = RunConfig(**kwargs)
    # one seed drives every stage
    for sec in (cfg.synth, cfg.init, cfg.trainer):
        sec.seed = cfg.seed
    return cfg


def load(
    path=None,
    preset_name: Optional[str] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    out: Optional[str] = None,
) -> RunConfig:
    """Preset defaults, then the YAML file, then ``--set`` overrides, then explicit flags."""
    file_tree: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file {p} does not exist")
        file_tree = yaml.safe_load(p.read_text()) or {}
        if not isinstance(file_tree, dict):
            raise ConfigurationError(f"config file {p} must hold a mapping")
    over = parse_overrides(overrides)
    name = preset_name or over.get("preset") or file_tree.get("preset") or "full"
    tree = _merge(_merge(preset(name), file_tree), over)
    tree["preset"] = name
    if seed is not None:
        tree["seed"] = seed
    if out is not None:
        tree["out"] = out
    return from_dict(tree)


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(json.loads(json.dumps(cfg.to_dict(), default=list)), sort_keys=False))
