"""Versioned checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive. The entry ``__meta__`` holds a
UTF-8 JSON document with at least ``format``, ``version`` and ``kind``; every other
entry is a named float or integer array. Loading refuses unknown formats and
newer major versions.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "builtcount-checkpoint"
VERSION = 1
META_KEY = "__meta__"


class CheckpointError(Exception):
    pass


def save_container(path, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    if META_KEY in arrays:
        raise CheckpointError(f"array name {META_KEY!r} is reserved")
    doc = {"format": FORMAT, "version": VERSION, **meta}
    payload = {META_KEY: np.frombuffer(json.dumps(doc, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    payload.update({k: np.asarray(v) for k, v in arrays.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if META_KEY not in arrays:
        raise CheckpointError(f"{path} has no {META_KEY} entry")
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {meta.get('format')!r}")
    if int(meta.get("version", 0)) > VERSION:
        raise CheckpointError(f"{path}: version {meta['version']} is newer than supported {VERSION}")
    return meta, arrays


def prefixed(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Sub-dictionary of entries under ``prefix/``, with the prefix stripped."""
    p = prefix.rstrip("/") + "/"
    return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}


def with_prefix(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    p = prefix.rstrip("/") + "/"
    return {p + k: v for k, v in arrays.items()}
