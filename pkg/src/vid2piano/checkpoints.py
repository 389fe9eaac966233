"""Checkpoint container: named parameter arrays + config snapshot + metric history.

On disk this is a single ``.npz`` with one entry per parameter under
``param/<name>`` and JSON-encoded ``__kind__``, ``__config__`` and
``__history__`` entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_PARAM_PREFIX = "param/"


@dataclass
class Checkpoint:
    kind: str
    params: dict[str, np.ndarray]
    config: dict
    history: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries = {_PARAM_PREFIX + name: arr for name, arr in self.params.items()}
        entries["__kind__"] = np.array(self.kind)
        entries["__config__"] = np.array(json.dumps(self.config))
        entries["__history__"] = np.array(json.dumps(self.history))
        with open(path, "wb") as fh:
            np.savez(fh, **entries)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as archive:
            params = {
                key[len(_PARAM_PREFIX) :]: archive[key]
                for key in archive.files
                if key.startswith(_PARAM_PREFIX)
            }
            kind = str(archive["__kind__"])
            config = json.loads(str(archive["__config__"]))
            history = json.loads(str(archive["__history__"]))
        return cls(kind=kind, params=params, config=config, history=history)


def require_kind(ckpt: Checkpoint, expected: str) -> Checkpoint:
    if ckpt.kind != expected:
        raise ValueError(f"checkpoint holds a {ckpt.kind!r} model, expected {expected!r}")
    return ckpt
