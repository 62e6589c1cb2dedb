"""Network checkpoint file format: one JSON header line followed by the raw
little-endian float64 weight buffer, tensors in header order. Writes go
through a temp file and an atomic rename."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError

MAGIC = "gsaudio-weights"
FORMAT_VERSION = 1


def save_weights(path, header: dict, named_arrays):
    """``named_arrays`` is a list of (name, array) pairs; order is preserved."""
    named = [(name, np.ascontiguousarray(arr, dtype="<f8")) for name, arr in named_arrays]
    header = dict(header)
    header["magic"] = MAGIC
    header["format"] = FORMAT_VERSION
    header["tensors"] = [{"name": name, "shape": list(arr.shape)} for name, arr in named]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, arr in named:
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_weights(path):
    """Returns (header dict, list of float64 arrays in header order)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: bad checkpoint header: {exc}") from exc
        if header.get("magic") != MAGIC:
            raise DataError(f"{path}: not a weight checkpoint")
        arrays = []
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise DataError(f"{path}: truncated weight buffer")
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    return header, arrays
