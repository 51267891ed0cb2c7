"""Config hashing and strict dict -> dataclass loading."""
from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(obj) -> str:
    """Short sha256 of the canonical JSON form of ``obj``."""
    blob = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def from_dict(cls, d, where=None):
    """Build dataclass ``cls`` from ``d``, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {where or cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)
