"""Pipeline configuration: one versioned JSON document, defaults < file < flags."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence as Seq

from concordance.concord import FusionConfig
from concordance.detfuse import ClusterConfig
from concordance.errors import ConfigError
from concordance.featnet import TrainConfig
from concordance.pipeline import StudentConfig
from concordance.synthlab import DetectionNoise, SyntheticTeacherSpec, WorldConfig, make_concordance, make_ensemble

SCHEMA = "concordance.config/1"
ENV_VAR = "CONCORDANCE_CONFIG"

DEFAULTS: dict = {
    "schema": SCHEMA,
    "seed": 0,
    "workers": 1,
    "data": {
        "num_sequences": 50,
        "num_test": 20,
        "labeled_fraction": 0.2,
        "world": {
            "num_frames_half": 3,
            "num_static": 4,
            "num_vehicles": 2,
            "num_pedestrians": 3,
            "points_per_object": 40,
            "ground_points": 150,
            "extent": 8.0,
            "noise": 0.02,
            "dropout": 0.1,
        },
    },
    "teachers": {
        "kind": "synthetic",  # or "trained"
        "mode": "concordance",  # or "ensemble"
        "ranges": [1, 2, 3],
        "ensemble_range": 2,
        "ensemble_count": 3,
        "synthetic": {
            "base_error": 0.99,
            "range_gain": 0.33,
            "temperature": 0.25,
            "wrong_margin": 0.5,
            "jitter": 0.4,
            "patch_radius": 0.0,
        },
        "trained": {"hidden": [32, 32], "width": 32, "max_neighbors": 8, "epochs": 20, "learning_rate": 0.05},
    },
    "fusion": {"lam": 0.1, "theta": 0.7},
    "cluster": {"iou_threshold": 0.5, "mode": "seed"},
    "select": {"use_pseudo": True},
    "student": {
        "past": 2,
        "hidden": [32, 32],
        "width": 32,
        "r0": 1.0,
        "slope": 0.5,
        "max_neighbors": 8,
        "time_scale": 1.0,
    },
    "train": {"learning_rate": 0.05, "epochs": 30, "batch_size": 256, "momentum": 0.9, "schedule": "cosine"},
    "eval": {"match_iou": 0.7, "interpolation": "all"},
    "sweep": {"thetas": [0.0, 0.3, 0.5, 0.7, 0.8, 0.9, 0.99]},
}


def _merge(base: dict, over: Mapping, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        path = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {path!r} must be an object")
            out[k] = _merge(base[k], v, path + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value``; the value is JSON when it parses, a bare string otherwise."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def _nest(path: list[str], value: Any) -> dict:
    d: Any = value
    for k in reversed(path):
        d = {k: d}
    return d


def load_config(path: Optional[str] = None, overrides: Seq[str] = ()) -> dict:
    """Resolve defaults, then the file (argument or env var), then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    path = path or os.environ.get(ENV_VAR) or None
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            doc = json.loads(p.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"{p}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        if doc.get("schema", SCHEMA) != SCHEMA:
            raise ConfigError(f"{p}: unsupported schema {doc.get('schema')!r}, expected {SCHEMA!r}")
        cfg = _merge(cfg, doc)
    for text in overrides:
        cfg = _merge(cfg, _nest(*parse_override(text)))
    validate(cfg)
    return cfg


def validate(cfg: Mapping) -> None:
    """Build every typed config once so bad values fail before any stage runs."""
    world_config(cfg)
    teacher_specs(cfg)
    fusion_config(cfg)
    cluster_config(cfg)
    student_config(cfg)
    train_config(cfg)
    d = cfg["data"]
    if d["num_sequences"] < 1 or d["num_test"] < 0:
        raise ConfigError("need num_sequences >= 1 and num_test >= 0")
    if not 0.0 <= d["labeled_fraction"] <= 1.0:
        raise ConfigError("labeled_fraction must lie in [0, 1]")
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    for th in cfg["sweep"]["thetas"]:
        if not 0.0 <= th <= 1.0:
            raise ConfigError("sweep thetas must lie in [0, 1]")


def _build(cls, kw: Mapping, what: str):
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from None


def world_config(cfg: Mapping, seed: Optional[int] = None) -> WorldConfig:
    kw = dict(cfg["data"]["world"])
    kw["seed"] = cfg["seed"] if seed is None else seed
    return _build(WorldConfig, kw, "world")


def teacher_specs(cfg: Mapping) -> list[SyntheticTeacherSpec]:
    """Teacher set of the configured mode; seeds derive from the run seed."""
    t = cfg["teachers"]
    if t["kind"] not in ("synthetic", "trained"):
        raise ConfigError(f"unknown teacher kind {t['kind']!r}")
    try:
        base = SyntheticTeacherSpec(temporal_range=0, seed=int(cfg["seed"]) * 100, detection=DetectionNoise(), **t["synthetic"])
    except TypeError as exc:
        raise ConfigError(f"bad teacher config: {exc}") from None
    if t["mode"] == "concordance":
        if not t["ranges"]:
            raise ConfigError("teachers.ranges is empty")
        return make_concordance([int(n) for n in t["ranges"]], base)
    if t["mode"] == "ensemble":
        count = int(t["ensemble_count"])
        seeds = [base.seed + 50 + i for i in range(count)]
        return make_ensemble(int(t["ensemble_range"]), count, seeds, base)
    raise ConfigError(f"unknown teacher mode {t['mode']!r}")


def fusion_config(cfg: Mapping, theta: Optional[float] = None) -> FusionConfig:
    kw = dict(cfg["fusion"])
    if theta is not None:
        kw["theta"] = theta
    return _build(FusionConfig, kw, "fusion")


def cluster_config(cfg: Mapping) -> ClusterConfig:
    return _build(ClusterConfig, dict(cfg["cluster"], fusion=fusion_config(cfg)), "cluster")


def student_config(cfg: Mapping) -> StudentConfig:
    kw = dict(cfg["student"])
    kw["hidden"] = tuple(kw["hidden"])
    kw["init_seed"] = int(cfg["seed"])
    return _build(StudentConfig, kw, "student")


def train_config(cfg: Mapping) -> TrainConfig:
    return _build(TrainConfig, dict(cfg["train"], seed=int(cfg["seed"])), "train")


def dumps(cfg: Mapping) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"
