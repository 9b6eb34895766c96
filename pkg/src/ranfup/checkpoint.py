"""Flat binary container for named tensors.

Layout: an 8-byte magic string, a little-endian u32 header length, a JSON
header mapping tensor names to dtype, shape, and byte offset, then the raw
little-endian payloads concatenated in sorted-name order.  Round trips are
bit exact, so saved model states reload to identical arrays.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"RNFTNSR1"

#: Supported dtypes mapped to explicit little-endian codes.
_DTYPE_CODES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "uint8": "|u1",
}


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write ``tensors`` to ``path``; names are stored sorted."""
    entries = {}
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype.name not in _DTYPE_CODES:
            raise CheckpointFormatError(
                f"tensor {name!r} has unsupported dtype {arr.dtype.name}"
            )
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[arr.dtype.name]).tobytes()
        entries[name] = {
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container written by :func:`save_tensors`."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointFormatError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path} is not a tensor checkpoint")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    header_start = len(MAGIC) + 4
    payload_start = header_start + header_len
    if payload_start > len(blob):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[header_start:payload_start].decode("utf-8"))
        entries = header["tensors"]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header: {exc}") from exc

    tensors = {}
    for name, meta in entries.items():
        try:
            code = _DTYPE_CODES[meta["dtype"]]
            shape = tuple(int(s) for s in meta["shape"])
            start = payload_start + int(meta["offset"])
            nbytes = int(meta["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: bad entry for {name!r}") from exc
        end = start + nbytes
        if end > len(blob):
            raise CheckpointFormatError(
                f"{path}: payload for {name!r} runs past end of file"
            )
        arr = np.frombuffer(blob[start:end], dtype=code)
        expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if arr.size != expected:
            raise CheckpointFormatError(
                f"{path}: {name!r} expects {expected} elements, found {arr.size}"
            )
        tensors[name] = arr.reshape(shape).astype(meta["dtype"], copy=True)
    return tensors
