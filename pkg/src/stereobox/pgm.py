"""Binary (P5) PGM image I/O.

Images are held in memory as float arrays in [0, 1]; files are 8-bit.
"""

from __future__ import annotations

import os

import numpy as np


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D grayscale image, got shape {img.shape}")
    h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with optional '#' comment lines.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise ValueError(f"{path}: truncated PGM header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            pos = raw.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end : end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    if data.size != w * h:
        raise ValueError(f"{path}: payload holds {data.size} bytes, expected {w * h}")
    return data.reshape(h, w).astype(float) / 255.0
