"""Versioned container of named tensors (``.npz`` with a JSON header)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": "llmkt-tensors", "version": FORMAT_VERSION, "meta": meta or {}}
    payload = {name: np.array(arr, order="C") for name, arr in tensors.items()}  # keeps 0-d shapes
    if _META_KEY in payload:
        raise ValueError(f"tensor name {_META_KEY!r} is reserved")
    payload[_META_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        if _META_KEY not in z.files:
            raise ValueError(f"{path}: not a tensor container")
        header = json.loads(bytes(z[_META_KEY]).decode())
        if header.get("format") != "llmkt-tensors":
            raise ValueError(f"{path}: unknown format {header.get('format')!r}")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {header.get('version')}")
        tensors = {k: z[k].copy() for k in z.files if k != _META_KEY}
    return tensors, header["meta"]
