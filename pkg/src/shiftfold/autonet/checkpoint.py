"""Checkpoint format: ``manifest.txt`` plus ``params.bin``.

The manifest has one tab-separated line per array::

    name  dtype  shape  offset  tag

``shape`` is ``x``-joined extents (``scalar`` for rank 0), ``offset`` is the
byte offset into ``params.bin``, and ``tag`` is free text (``-`` when unset).
The blob is the little-endian float64 values concatenated in manifest order.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

MANIFEST = "manifest.txt"
BLOB = "params.bin"
_HEADER = "# name\tdtype\tshape\toffset\ttag\n"


def save_checkpoint(directory, arrays: dict[str, np.ndarray], tags: dict[str, str] | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tags = tags or {}
    lines = [_HEADER]
    offset = 0
    with open(directory / BLOB, "wb") as blob:
        for name, arr in arrays.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"parameter name {name!r} contains whitespace")
            data = np.ascontiguousarray(arr, dtype="<f8")
            shape = "x".join(str(s) for s in data.shape) or "scalar"
            lines.append(f"{name}\tfloat64\t{shape}\t{offset}\t{tags.get(name, '-')}\n")
            blob.write(data.tobytes())
            offset += data.nbytes
    (directory / MANIFEST).write_text("".join(lines))
    return directory


def load_checkpoint(directory, with_tags: bool = False):
    directory = Path(directory)
    raw = (directory / BLOB).read_bytes()
    arrays, tags = {}, {}
    for line in (directory / MANIFEST).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        name, dtype, shape, offset, tag = line.split("\t")
        if dtype != "float64":
            raise ValueError(f"{name}: unsupported dtype {dtype}")
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        count = int(np.prod(dims, dtype=np.int64))
        start = int(offset)
        end = start + 8 * count
        if end > len(raw):
            raise ValueError(f"{name}: blob truncated")
        arrays[name] = np.frombuffer(raw[start:end], dtype="<f8").astype(np.float64).reshape(dims)
        tags[name] = tag
    return (arrays, tags) if with_tags else arrays
