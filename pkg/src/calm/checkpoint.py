"""Versioned checkpoint container for training state.

A checkpoint is a single ``.npz`` file holding named float arrays plus a JSON
metadata blob (format version, kind tag, full config, config hash, and any
extra state such as RNG snapshots). Loading verifies the config hash so a
checkpoint cannot silently be resumed under a different configuration.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding: sorted keys, no whitespace variance."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def _encode_meta(meta: dict[str, Any]) -> np.ndarray:
    return np.frombuffer(canonical_json(meta).encode("utf-8"), dtype=np.uint8).copy()


def _decode_meta(arr: np.ndarray) -> dict[str, Any]:
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def save_checkpoint(path: str | Path, kind: str, config: dict[str, Any],
                    arrays: dict[str, np.ndarray],
                    extra: dict[str, Any] | None = None) -> Path:
    """Write a checkpoint; returns the path actually written.

    `arrays` keys must not collide with the metadata key. `extra` must be
    JSON-serializable (used for counters and RNG state).
    """
    path = Path(path)
    if _META_KEY in arrays:
        raise ValueError(f"array name {_META_KEY!r} is reserved")
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "extra": extra or {},
        "array_names": sorted(arrays),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **{_META_KEY: _encode_meta(meta)}, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expect_config: dict[str, Any] | None = None,
                    force: bool = False) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Read a checkpoint back as ``(meta, arrays)``.

    If `expect_config` is given its hash must match the stored one; pass
    ``force=True`` to override (the mismatch is still reported in meta under
    ``"hash_mismatch"``).
    """
    path = Path(path)
    with np.load(path) as data:
        if _META_KEY not in data:
            raise ValueError(f"{path} is not a checkpoint (missing metadata)")
        meta = _decode_meta(data[_META_KEY])
        arrays = {k: data[k] for k in data.files if k != _META_KEY}
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format {meta.get('format_version')} != supported {FORMAT_VERSION}")
    if expect_config is not None:
        want = config_hash(expect_config)
        if want != meta["config_hash"]:
            if not force:
                raise ValueError(
                    "checkpoint config hash mismatch: "
                    f"stored {meta['config_hash'][:12]}.., expected {want[:12]}.. "
                    "(pass force=True / --force to override)")
            meta["hash_mismatch"] = True
    return meta, arrays
