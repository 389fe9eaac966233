"""Run configuration: one YAML file drives ingest, training and inference."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import yaml

from .errors import ConfigError
from .roll2midi import Roll2MidiConfig
from .synth import SynthConfig
from .video2roll import Video2RollConfig

SYNTH_MODES = ("classical", "deep")


@dataclass
class RunConfig:
    seed: int = 0
    paths: dict = field(default_factory=dict)
    crops: dict = field(default_factory=dict)  # video stem -> (x, y, w, h)
    thresholds: tuple = (0.4, 0.5)
    synth_mode: str = "classical"
    val_fraction: float = 0.2
    occlusion: float = 0.2  # synthetic rendering default
    video2roll: Video2RollConfig = field(default_factory=Video2RollConfig)
    roll2midi: Roll2MidiConfig = field(default_factory=Roll2MidiConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def snapshot(self) -> dict:
        return asdict(self)


def _from_mapping(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"expected a mapping, got {type(raw).__name__}", path)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", f"{path}.{unknown[0]}" if path else unknown[0])
    coerced = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        if isinstance(value, list):
            value = tuple(value)
        coerced[f.name] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err), path) from err


def run_config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    sections = {}
    for name, cls in (
        ("video2roll", Video2RollConfig),
        ("roll2midi", Roll2MidiConfig),
        ("synth", SynthConfig),
    ):
        if name in raw:
            sections[name] = _from_mapping(cls, raw.pop(name), name)
    cfg = _from_mapping(RunConfig, raw, "")
    for name, sub in sections.items():
        setattr(cfg, name, sub)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if not isinstance(cfg.paths, dict):
        raise ConfigError("expected a mapping", "paths")
    if cfg.synth_mode not in SYNTH_MODES:
        raise ConfigError(f"must be one of {SYNTH_MODES}, got {cfg.synth_mode!r}", "synth_mode")
    if not 0.0 < cfg.val_fraction < 1.0:
        raise ConfigError(f"must be in (0, 1), got {cfg.val_fraction}", "val_fraction")
    if not 0.0 <= cfg.occlusion <= 1.0:
        raise ConfigError(f"must be in [0, 1], got {cfg.occlusion}", "occlusion")
    for i, ts in enumerate(cfg.thresholds):
        if not 0.0 < ts < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {ts}", f"thresholds[{i}]")
    if not isinstance(cfg.crops, dict):
        raise ConfigError("expected a mapping of video stem -> [x, y, w, h]", "crops")
    for key, rect in cfg.crops.items():
        rect = tuple(rect) if isinstance(rect, (list, tuple)) else rect
        if not (isinstance(rect, tuple) and len(rect) == 4):
            raise ConfigError("crop must be [x, y, w, h]", f"crops.{key}")
        cfg.crops[key] = tuple(int(v) for v in rect)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist", str(path))
    raw = yaml.safe_load(path.read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level of the config must be a mapping", str(path))
    return run_config_from_dict(raw)


def require_paths(cfg: RunConfig, keys: tuple[str, ...]) -> dict[str, Path]:
    """Resolve and existence-check the named ``paths`` entries."""
    out = {}
    for key in keys:
        if key not in cfg.paths:
            raise ConfigError(f"missing required entry {key!r}", f"paths.{key}")
        p = Path(cfg.paths[key])
        if not p.exists():
            raise ConfigError(f"path {p} does not exist", f"paths.{key}")
        out[key] = p
    return out
