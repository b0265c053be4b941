"""Run configuration: one JSON file plus ``key=value`` overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import SyntheticConfig
from .errors import ConfigurationError
from .loss import LossConfig
from .model import FaCoRConfig
from .training import TrainConfig


@dataclass
class EvalConfig:
    policy: str = "best-on-validation"
    fixed_threshold: float = 0.0
    fusion: str = "mean"
    ks: tuple = (1, 5, 10)
    quality_threshold: Optional[float] = None
    quality_bins: bool = True
    kfolds: int = 5
    backbone_only: bool = False
    max_pairs: int = 8


@dataclass
class RunConfig:
    model: FaCoRConfig = field(default_factory=FaCoRConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    arch: str = "facor"
    data_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["synthetic"]["split"] = list(self.synthetic.split)
        d["synthetic"]["quality_range"] = list(self.synthetic.quality_range)
        d["eval"]["ks"] = list(self.eval.ks)
        return d


# Desk-scale profile used when no config file is given: toy dims, a batch that
# fits 12 training families, and s chosen so that psi = 16 / 200 = 0.08.
DESK_DEFAULTS = {
    "model": {"H": 4, "W": 4, "C": 8, "D": 8},
    "train": {"batch_size": 8, "epochs": 50, "lr": 1e-2, "loss": {"scale_s": 200.0}},
}


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(d: dict, expr: str) -> dict:
    if "=" not in expr:
        raise ConfigurationError(f"override must look like key=value, got {expr!r}")
    key, value = expr.split("=", 1)
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override key {key!r} descends into a non-section")
    node[parts[-1]] = _parse_value(value)
    return d


def _build(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"{cls.__name__}: {exc}") from None


def build_run_config(d: dict) -> RunConfig:
    d = dict(d)
    train = dict(d.get("train", {}))
    train["loss"] = _build(LossConfig, train.get("loss", {}))
    ev = dict(d.get("eval", {}))
    if "ks" in ev:
        ev["ks"] = tuple(int(k) for k in ev["ks"])
    return _build(RunConfig, {
        **{k: v for k, v in d.items() if k not in ("model", "train", "synthetic", "eval")},
        "model": _build(FaCoRConfig, d.get("model", {})),
        "train": _build(TrainConfig, train),
        "synthetic": _build(SyntheticConfig, d.get("synthetic", {})),
        "eval": _build(EvalConfig, ev),
    })


def load_run_config(path=None, overrides=(), seed: Optional[int] = None) -> RunConfig:
    d = copy.deepcopy(DESK_DEFAULTS)
    if path is not None:
        try:
            d = _merge(d, json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    for expr in overrides:
        apply_override(d, expr)
    if seed is not None:
        d["seed"] = seed
    d.setdefault("train", {})["seed"] = d.get("seed", 0)
    return build_run_config(d)
