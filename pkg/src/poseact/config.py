"""Flat ``section.key = value`` run configuration."""
from __future__ import annotations

import json
import os
from pathlib import Path

ENV_VAR = "POSE_ACT_CONFIG"

DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "run.workers": 0,            # 0: all available cores
    "camera.fx": 320.0,
    "camera.fy": 320.0,
    "camera.cx": 160.0,
    "camera.cy": 160.0,
    "camera.width": 320,
    "camera.height": 320,
    "steps.tx_ty": 3.0,
    "steps.tz": 1.0 / 30.0,
    "steps.rot": 3.0,
    "loop.max_steps": 30,
    "loop.oscillation_check": True,
    "loop.quantization": 0.25,
    "loop.patch_side": 128,
    "train.batch_size": 32,
    "train.learning_rate": 1e-4,
    "train.decay": 0.95,
    "train.decay_every": 1000,
    "train.steps": 25000,
    "train.buffer_size": 2048,
    "train.refresh": 6,
    "data.per_group": 1000,
    "data.augment": True,
    "paths.mesh": "",
    "paths.backgrounds": "",
    "detection.grid_spacing": 16.0,
    "detection.smoothing": 0.0,
    "detection.probe_depth": 1.0,
    "detection.rotations": 60,
    "detection.cap": 40,
    "robustness.delta": 6,
    "robustness.cap": 200,
    "robustness.scenes": 4,
    "robustness.m_max": 45,
    "eval.symmetric": False,
}


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    return t


def parse_config(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.count(".") != 1 or not all(key.split(".")):
            raise ConfigError(f"{source}:{n}: key must look like section.key, got {key!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, parse_value(value), f"{source}:{n}")
    return out


def _coerce(key: str, value, where: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: {key} expects true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: {key} expects an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: {key} expects a number")
        return float(value)
    return str(value)


def load_config(path=None) -> dict:
    """Defaults, overlaid with ``path`` (or the file named by POSE_ACT_CONFIG)."""
    cfg = dict(DEFAULTS)
    path = path or os.environ.get(ENV_VAR) or None
    if path:
        p = Path(path)
        cfg.update(parse_config(p.read_text(encoding="utf-8"), str(p)))
    return cfg


def merge_overrides(cfg: dict, overrides: dict) -> dict:
    out = dict(cfg)
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in DEFAULTS:
            raise ConfigError(f"unknown key {k!r}")
        out[k] = _coerce(k, v, "command line")
    return out


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True)
