"""Tensor files: one JSON header line followed by little-endian raw values."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_PRECISIONS = {"standard": "<f4", "extended": "<f8"}


def save_tensor(path, array: np.ndarray, name: str) -> None:
    array = np.asarray(array)
    precision = "extended" if array.dtype == np.float64 else "standard"
    header = {"name": name, "shape": list(array.shape), "precision": precision}
    raw = np.ascontiguousarray(array, dtype=_PRECISIONS[precision]).tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(raw)


def load_tensor(path) -> tuple[str, np.ndarray]:
    blob = Path(path).read_bytes()
    head, _, raw = blob.partition(b"\n")
    header = json.loads(head)
    dtype = np.dtype(_PRECISIONS[header["precision"]])
    shape = tuple(header["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes of data, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return header["name"], arr
