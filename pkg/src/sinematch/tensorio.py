""".tnsr files: one JSON header line, then raw little-endian float32 payload.

The on-disk dtype is fixed at f32 (checkpoints and image pools do not need
more); values are range-checked on load and widened to float64 in memory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_HEADER_DTYPE = "f32"
_F32_MAX = float(np.finfo(np.float32).max)


def save_tensor(path, array) -> None:
    arr = np.ascontiguousarray(getattr(array, "data", array), dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"refusing to write non-finite values to {path}")
    if np.abs(arr).max(initial=0.0) > _F32_MAX:
        raise ValueError(f"values exceed float32 range, cannot write {path}")
    header = {
        "shape": list(arr.shape),
        "dtype": _HEADER_DTYPE,
        "order": "row-major",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(arr.astype("<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a .tnsr file and return its payload widened to float64."""
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed .tnsr header") from exc
    for key in ("shape", "dtype", "order"):
        if key not in header:
            raise ValueError(f"{path}: .tnsr header missing {key!r}")
    if header["dtype"] != _HEADER_DTYPE or header["order"] != "row-major":
        raise ValueError(f"{path}: unsupported .tnsr encoding {header}")
    shape = tuple(int(s) for s in header["shape"])
    count = int(np.prod(shape)) if shape else 1
    flat = np.frombuffer(payload, dtype="<f4")
    if flat.size != count:
        raise ValueError(
            f"{path}: payload holds {flat.size} values, header promises {count}"
        )
    if not np.all(np.isfinite(flat)):
        raise ValueError(f"{path}: payload contains non-finite values")
    return flat.astype(np.float64).reshape(shape)
