"""Checkpoint directories: ``manifest.json`` plus a flat little-endian float32 ``weights.bin``.

Every module persists through this format.  Entry names are slash-separated
paths such as ``adapter/sst/layer0/D``; entries are stored in the order given.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointError

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
_LE_F32 = np.dtype("<f4")


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write ``payload`` to a sibling temp file, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(
    directory: str | os.PathLike,
    arrays: Mapping[str, Any],
    meta: Mapping[str, Any] | None = None,
) -> Path:
    """Write ``arrays`` (name -> array or Tensor) as a checkpoint directory."""
    directory = Path(directory)
    entries = []
    chunks = []
    offset = 0
    for name, value in arrays.items():
        arr = np.asarray(getattr(value, "data", value))
        blob = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "byte_offset": offset,
                "byte_len": len(blob),
            }
        )
        chunks.append(blob)
        offset += len(blob)
    manifest = {"entries": entries, "meta": dict(meta or {})}
    atomic_write_bytes(directory / WEIGHTS, b"".join(chunks))
    atomic_write_text(directory / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a checkpoint directory back into ``(name -> float32 array, meta)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
        raw = (directory / WEIGHTS).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{entry['name']}: unsupported dtype {entry.get('dtype')!r}")
        start, length = entry["byte_offset"], entry["byte_len"]
        if start + length > len(raw):
            raise CheckpointError(f"{entry['name']}: byte range exceeds weights.bin")
        arr = np.frombuffer(raw[start : start + length], dtype=_LE_F32)
        arrays[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    return arrays, manifest.get("meta", {})


def checkpoint_digest(directory: str | os.PathLike) -> bytes:
    """Raw bytes of manifest and weights, for byte-equality comparisons."""
    directory = Path(directory)
    return (directory / MANIFEST).read_bytes() + b"\0" + (directory / WEIGHTS).read_bytes()
