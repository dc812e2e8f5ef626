"""Versioned checkpoint container: JSON manifest plus raw float64 payload.

Layout: a magic line, the manifest length in bytes, the manifest itself
(format version, config snapshot, array directory, free-form meta), then all
arrays concatenated as little-endian float64. Round-tripping is bit-exact,
which is what makes training runs resumable without drift.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"GNCACKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable container or incompatible format version."""


def save_checkpoint(path, config_dict: dict, arrays: list[tuple[str, np.ndarray]], meta: dict) -> None:
    directory = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        arr = np.asarray(arr, dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config_dict,
        "arrays": directory,
        "meta": meta,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(header)}\n".encode("ascii"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Returns (config_dict, {name: array}, meta); bit-exact inverse of save."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header_len = int(fh.readline().strip())
        manifest = json.loads(fh.read(header_len).decode("utf-8"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {manifest.get('format_version')} "
                f"!= supported {FORMAT_VERSION}"
            )
        payload = np.frombuffer(fh.read(), dtype="<f8")
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        chunk = payload[entry["offset"] : entry["offset"] + size]
        arrays[entry["name"]] = chunk.reshape(shape).copy()
    return manifest["config"], arrays, manifest["meta"]
