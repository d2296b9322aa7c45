"""Run configuration: YAML files, flag overrides and a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import yaml


def config_hash(obj: Any) -> str:
    """sha256 prefix of the canonical (sorted-key) JSON form."""
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_yaml(path: str | Path) -> dict:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return data


def build(cls, values: Mapping[str, Any]):
    """Instantiate dataclass ``cls`` from ``values``, rejecting unknown keys."""
    names = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, val in values.items():
        default = names[key].default
        if isinstance(default, bool) and not isinstance(val, bool):
            val = str(val).lower() in ("1", "true", "yes", "on")
        elif isinstance(default, (int, float)) and not isinstance(default, bool) and val is not None:
            val = type(default)(val)
        kwargs[key] = val
    return cls(**kwargs)


def merge(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict:
    out = dict(base)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out
