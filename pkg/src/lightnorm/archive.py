"""Flat binary tensor archive: 8-byte little-endian header length, JSON header
mapping parameter names to {dtype, shape, data_offsets}, then raw tensor bytes.

Used both for backbone weights and for training checkpoints. Writes are
canonical (names sorted, compact JSON) so identical contents produce
byte-identical files.
"""

import json
import struct

import numpy as np

from .errors import ConfigurationError, InputError

_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "U16": np.dtype("<u2"),
    "U8": np.dtype("u1"),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def save_archive(path, arrays, metadata=None):
    """Write named numpy arrays (plus optional str->str metadata) to `path`."""
    header = {}
    if metadata:
        bad = {k: v for k, v in metadata.items() if not isinstance(v, str)}
        if bad:
            raise ConfigurationError(f"archive metadata values must be str, got {bad}")
        header["__metadata__"] = dict(metadata)

    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])  # .tobytes() below yields C-order bytes
        key = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if key not in _DTYPE_CODES:
            raise ConfigurationError(f"unsupported dtype {arr.dtype} for '{name}'")
        arr = arr.astype(key, copy=False)
        blob = arr.tobytes()
        header[name] = {
            "dtype": _DTYPE_CODES[key],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        offset += len(blob)
        blobs.append(blob)

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_archive(path):
    """Read an archive, returning (dict name -> array, dict metadata)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise InputError(f"cannot read archive {path}: {e}") from e

    if len(raw) < 8:
        raise InputError(f"archive {path} is truncated (no header length)")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise InputError(f"archive {path} header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InputError(f"archive {path} has an unparseable header: {e}") from e
    if not isinstance(header, dict):
        raise InputError(f"archive {path} header is not a JSON object")

    metadata = header.pop("__metadata__", {})
    data = raw[8 + header_len :]
    arrays = {}
    for name, entry in header.items():
        try:
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            start, end = entry["data_offsets"]
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"archive {path}: bad entry for '{name}': {e}") from e
        if end > len(data) or start < 0 or start > end:
            raise InputError(f"archive {path}: offsets for '{name}' out of range")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if (end - start) != count * dtype.itemsize:
            raise InputError(
                f"archive {path}: '{name}' byte span {end - start} does not match "
                f"shape {shape} with dtype {entry['dtype']}"
            )
        arrays[name] = np.frombuffer(data[start:end], dtype=dtype).reshape(shape).copy()
    return arrays, metadata
