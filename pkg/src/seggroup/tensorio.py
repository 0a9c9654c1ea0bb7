"""Tensor-container file format.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
each tensor name to ``{dtype, shape, byte_offset}`` (offsets relative to the
start of the data section), then the raw little-endian tensor bytes. String
metadata rides along under the reserved ``__metadata__`` key.

Used for feature maps, codebooks, and token-bank checkpoints.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Any, Mapping

import numpy as np

from .errors import TensorFormatError

_MAGICLEN = 8
_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int32": np.int32,
    "int64": np.int64,
    "uint8": np.uint8,
}
METADATA_KEY = "__metadata__"


def save_tensors(path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> None:
    """Write ``tensors`` atomically (temp file + rename)."""
    entries: dict[str, Any] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, array in tensors.items():
        arr = np.ascontiguousarray(array)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise TensorFormatError(f"unsupported dtype {dtype_name!r} for tensor {name!r}")
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries[name] = {"dtype": dtype_name, "shape": list(arr.shape), "byte_offset": offset}
        blobs.append(raw)
        offset += len(raw)
    if metadata:
        entries[METADATA_KEY] = dict(metadata)
    header = json.dumps(entries, sort_keys=True).encode("utf-8")

    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".tsr")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(len(header).to_bytes(_MAGICLEN, "little"))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a container; returns ``(tensors, metadata)``.

    Raises :class:`TensorFormatError` for truncated or malformed files.
    """
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise TensorFormatError(f"cannot read tensor container {path!r}: {exc}") from exc

    if len(blob) < _MAGICLEN:
        raise TensorFormatError(f"{path!r}: file too short for header length field")
    header_len = int.from_bytes(blob[:_MAGICLEN], "little")
    if len(blob) < _MAGICLEN + header_len:
        raise TensorFormatError(f"{path!r}: truncated header")
    try:
        entries = json.loads(blob[_MAGICLEN : _MAGICLEN + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path!r}: invalid JSON header: {exc}") from exc
    if not isinstance(entries, dict):
        raise TensorFormatError(f"{path!r}: header must be a JSON object")

    metadata = entries.pop(METADATA_KEY, {})
    data = blob[_MAGICLEN + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, spec in entries.items():
        try:
            dtype = _DTYPES[spec["dtype"]]
            shape = tuple(int(s) for s in spec["shape"])
            start = int(spec["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TensorFormatError(f"{path!r}: malformed entry for {name!r}") from exc
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if start < 0 or start + nbytes > len(data):
            raise TensorFormatError(f"{path!r}: tensor {name!r} extends past end of file")
        tensors[name] = np.frombuffer(data[start : start + nbytes], dtype=dtype).reshape(shape).copy()
    return tensors, metadata
