"""Checkpoint directory format: one JSON manifest plus one raw binary blob.

The manifest maps array names to shape, dtype and byte offset into
``params.bin`` (little-endian, arrays serialized in manifest order); a
free-form ``extra`` section carries JSON-serializable state such as RNG
states and the resolved config.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint"]

MANIFEST = "manifest.json"
BLOB = "params.bin"


def save_checkpoint(directory: str | Path, arrays: Mapping[str, np.ndarray],
                    extra: dict[str, Any] | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries: dict[str, dict] = {}
    offset = 0
    with open(directory / BLOB, "wb") as blob:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            entries[name] = {
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "offset": offset,
            }
            blob.write(raw)
            offset += len(raw)
    manifest = {"arrays": entries, "extra": extra or {}}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    raw = (directory / BLOB).read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for name, meta in manifest["arrays"].items():
        dt = np.dtype(meta["dtype"]).newbyteorder("<")
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"]
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=start)
        arrays[name] = arr.astype(np.dtype(meta["dtype"])).reshape(meta["shape"]).copy()
    return arrays, manifest.get("extra", {})
