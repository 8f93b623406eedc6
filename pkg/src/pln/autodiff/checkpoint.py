"""Parameter checkpoints: an ``.npz`` archive of little-endian float64 arrays.

A ``__header__`` entry holds UTF-8 JSON with the model-config hash and any
extra metadata (e.g. training progress). Optional ``__state__/*`` entries
carry optimizer buffers so a run can resume bit-exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

HEADER_KEY = "__header__"
STATE_PREFIX = "__state__/"


class CheckpointMismatch(RuntimeError):
    pass


def save_checkpoint(path, params: dict, config_hash: str, meta: dict | None = None,
                    state: dict | None = None) -> None:
    header = {"format": "pln-checkpoint/1", "config_hash": config_hash,
              "params": {k: list(v.shape) for k, v in params.items()}, "meta": meta or {}}
    arrays = {HEADER_KEY: np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, t in params.items():
        data = t.data if hasattr(t, "data") else t
        arrays[name] = np.asarray(data, dtype="<f8")
    for name, arr in (state or {}).items():
        arr = np.asarray(arr)
        arrays[STATE_PREFIX + name] = arr.astype("<f8") if np.issubdtype(arr.dtype, np.floating) else arr
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_header(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z[HEADER_KEY]).decode())


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[dict, dict, dict]:
    """Return ``(params, header, state)`` with params as float64 arrays."""
    with np.load(path) as z:
        header = json.loads(bytes(z[HEADER_KEY]).decode())
        if expected_hash is not None and header["config_hash"] != expected_hash:
            raise CheckpointMismatch(
                f"checkpoint was written for config {header['config_hash'][:12]}, "
                f"current config hashes to {expected_hash[:12]}")
        params = {k: z[k] for k in header["params"]}
        state = {k[len(STATE_PREFIX):]: z[k] for k in z.files if k.startswith(STATE_PREFIX)}
    return params, header, state
