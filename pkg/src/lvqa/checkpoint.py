"""On-disk weight storage.

A checkpoint is a directory holding `index.json` (parameter name ->
shape, dtype, byte offset) and `weights.bin` (the little-endian flat
concatenation of all parameter arrays, in index order). Round-trips are
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(directory, params: dict) -> None:
    """Write a name -> Tensor/ndarray mapping to `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported checkpoint dtype {dtype} for '{name}'")
        blob = np.ascontiguousarray(arr).astype(_DTYPES[dtype], copy=False).tobytes()
        index[name] = {"shape": list(arr.shape), "dtype": dtype, "offset": offset}
        offset += len(blob)
        blobs.append(blob)
    with open(directory / "weights.bin", "wb") as f:
        for blob in blobs:
            f.write(blob)
    with open(directory / "index.json", "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    """Read a checkpoint directory back into a name -> ndarray mapping."""
    directory = Path(directory)
    with open(directory / "index.json") as f:
        index = json.load(f)
    raw = (directory / "weights.bin").read_bytes()
    out = {}
    for name, meta in index.items():
        shape = tuple(meta["shape"])
        dt = np.dtype(_DTYPES[meta["dtype"]])
        n = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=start).reshape(shape)
        out[name] = arr.astype(meta["dtype"])
    return out
