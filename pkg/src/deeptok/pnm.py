"""Raw portable pixmap/graymap I/O for frames stored in [-1, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round((np.clip(frame, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def write(path: str | Path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[..., None]
    h, w, ch = frame.shape
    if ch not in (1, 3):
        raise ValueError(f"frames need 1 or 3 channels, got {ch}")
    magic = b"P5" if ch == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + to_uint8(frame).tobytes())


def read(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"unsupported pnm file {path}")
    ch = 1 if magic == b"P5" else 3
    arr = np.frombuffer(data[pos : pos + w * h * ch], dtype=np.uint8).reshape(h, w, ch)
    return arr.astype(np.float64) / 127.5 - 1.0
