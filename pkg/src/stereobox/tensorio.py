"""Tensor dump format for test fixtures and feature files.

Layout: one ASCII header line "shape: d0 d1 ...\n" followed by the
row-major payload as little-endian 32-bit floats.
"""

from __future__ import annotations

import os

import numpy as np


def save_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    header = "shape: " + " ".join(str(d) for d in arr.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        if not header.startswith("shape:"):
            raise ValueError(f"{path}: missing 'shape:' header")
        shape = tuple(int(tok) for tok in header.split()[1:])
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read()
    data = np.frombuffer(payload, dtype="<f4", count=count)
    if data.size != count:
        raise ValueError(f"{path}: payload holds {data.size} floats, header promises {count}")
    return data.reshape(shape).astype(np.float32)
