"""Flat tensor archive: a text manifest followed by raw little-endian payloads.

Layout::

    deeptok-archive 1
    <name> <dtype> <d0,d1,...> <offset> <nbytes>
    ...
    end
    <payload bytes>

Offsets are relative to the first payload byte. Entries are written in
sorted name order so that identical contents always give identical bytes.
"""

from __future__ import annotations

import io
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = "deeptok-archive 1"

_DTYPES = {
    "f8": (np.dtype("<f8"), torch.float64),
    "f4": (np.dtype("<f4"), torch.float32),
    "i8": (np.dtype("<i8"), torch.int64),
}
_CODES = {torch.float64: "f8", torch.float32: "f4", torch.int64: "i8"}


class CheckpointError(ValueError):
    pass


def _shape_str(shape) -> str:
    return ",".join(str(int(s)) for s in shape) if len(shape) else "-"


def dumps(tensors: dict[str, torch.Tensor]) -> bytes:
    lines = [MAGIC]
    blobs = []
    offset = 0
    for name in sorted(tensors):
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name may not contain whitespace: {name!r}")
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code = _CODES[t.dtype]
        raw = t.numpy().astype(_DTYPES[code][0], copy=False).tobytes()
        lines.append(f"{name} {code} {_shape_str(t.shape)} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs)


def loads(data: bytes) -> "OrderedDict[str, torch.Tensor]":
    buf = io.BytesIO(data)
    if buf.readline().decode("ascii").rstrip("\n") != MAGIC:
        raise CheckpointError("not a deeptok archive")
    entries = []
    while True:
        line = buf.readline()
        if not line:
            raise CheckpointError("manifest is not terminated")
        line = line.decode("ascii").rstrip("\n")
        if line == "end":
            break
        name, code, shape, offset, nbytes = line.split(" ")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype {code}")
        dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        entries.append((name, code, dims, int(offset), int(nbytes)))
    base = buf.tell()
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, code, dims, offset, nbytes in entries:
        np_dtype, torch_dtype = _DTYPES[code]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * np_dtype.itemsize:
            raise CheckpointError(f"{name}: byte count does not match shape {dims}")
        chunk = data[base + offset : base + offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{name}: payload truncated")
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(dims).copy()
        out[name] = torch.from_numpy(arr).to(torch_dtype)
    return out


def save(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors))
    tmp.replace(path)


def load(path: str | Path) -> "OrderedDict[str, torch.Tensor]":
    return loads(Path(path).read_bytes())


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k.replace(".", "/"): v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy archive tensors into ``module``; every name and shape must match."""
    expected = module.state_dict()
    wanted = {prefix + k.replace(".", "/"): k for k in expected}
    present = {k for k in tensors if k.startswith(prefix)}
    missing = sorted(set(wanted) - present)
    extra = sorted(present - set(wanted))
    if missing or extra:
        raise CheckpointError(f"archive/model mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    state = {}
    for name, key in wanted.items():
        t = tensors[name]
        if tuple(t.shape) != tuple(expected[key].shape):
            raise CheckpointError(
                f"{name}: archive shape {tuple(t.shape)} != model shape {tuple(expected[key].shape)}"
            )
        state[key] = t.to(expected[key].dtype)
    module.load_state_dict(state)
