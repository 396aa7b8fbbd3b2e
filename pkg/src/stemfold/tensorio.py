"""Binary tensor container and plain-text manifests.

Tensor file layout (bit-exact contract, little-endian):
  8-byte magic ``STEMTENS`` | u32 rank | rank x u32 extents | row-major f32 data

Masks travel as 0.0/1.0 floats in the same format. Manifests are ``key = value``
lines (str/int/float/bool/comma-lists), one per line, '#' comments allowed.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"STEMTENS"
FORMAT_VERSION = 1
TENSOR_SUFFIX = ".tens"


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fh.read(4 * count), dtype="<f4", count=count)
        if data.size != count:
            raise ValueError(f"{path}: truncated payload")
        return data.reshape(shape).astype(np.float64)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(s: str):
    s = s.strip()
    if "," in s:
        return [_parse_value(p) for p in s.split(",")]
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def write_manifest(path: str | Path, entries: dict) -> None:
    lines = [f"{k} = {_format_value(v)}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> dict:
    out: dict = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed manifest line {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out
