"""Binary checkpoint container.

Layout: 16-byte magic, an 8-byte little-endian manifest length, the JSON
manifest (entry list with identifier / shape / dtype / offset, plus free-form
metadata), then the raw little-endian array payloads. Save followed by load
is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"BORDERFLOW-CKPT1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        blob = arr.astype(dtype, copy=False).tobytes()
        entries.append({
            "id": name,
            "shape": list(arr.shape),
            "dtype": dtype.str,
            "offset": offset,
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"entries": entries, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(manifest).to_bytes(8, "little"))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:16] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    n = int.from_bytes(data[16:24], "little")
    manifest = json.loads(data[24:24 + n].decode("utf-8"))
    payload = data[24 + n:]
    arrays = {}
    for entry in manifest["entries"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start).reshape(shape)
        arrays[entry["id"]] = arr.copy()
    return arrays, manifest["meta"]


def generator_state(rng: np.random.Generator) -> dict:
    """JSON-serializable state of a numpy Generator (PCG64)."""
    return rng.bit_generator.state


def generator_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
