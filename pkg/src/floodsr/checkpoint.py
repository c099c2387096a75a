"""Checkpoint container: one file holding JSON metadata plus raw tensors.

Layout:

    bytes 0..3    magic "FCKP"
    bytes 4..5    format version, u16 (currently 1)
    bytes 6..7    reserved, zero
    bytes 8..15   metadata length in bytes, u64
    ...           UTF-8 JSON metadata
    ...           zero padding to the next 8-byte boundary
    ...           tensor payloads, each at the 8-byte-aligned offset
                  recorded in the metadata, little-endian

The metadata carries everything non-tensor: configuration, schedule and
normalization constants, optimizer scalars, RNG state and step counters.
Serialization is deterministic (sorted keys, sorted tensor names), so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CorruptionError, FormatError

MAGIC = b"FCKP"
VERSION = 1
_PREFIX = struct.Struct("<4sHHQ")

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict


def _align8(n):
    return (n + 7) & ~7


def save_checkpoint(path, meta, tensors):
    """Write metadata plus named float arrays to a single container file.

    Tensor offsets in the index are relative to the 8-byte-aligned payload
    base that follows the metadata, so the index does not depend on its
    own serialized length.
    """
    names = sorted(tensors)
    index = {}
    offset = 0
    for name in names:
        arr = np.asarray(tensors[name])
        if arr.dtype not in (np.float32, np.float64):
            raise ContractError(f"tensor {name!r} must be float32 or float64")
        dtype = "<f4" if arr.dtype == np.float32 else "<f8"
        index[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset}
        offset = _align8(offset + arr.size * arr.dtype.itemsize)

    meta_doc = {"format_version": VERSION, "meta": meta, "tensors": index}
    blob = json.dumps(meta_doc, sort_keys=True, separators=(",", ":")).encode()
    base = _align8(_PREFIX.size + len(blob))

    out = bytearray(base + offset)
    out[: _PREFIX.size] = _PREFIX.pack(MAGIC, VERSION, 0, len(blob))
    out[_PREFIX.size : _PREFIX.size + len(blob)] = blob
    for name in names:
        arr = np.asarray(tensors[name])
        dtype = _DTYPES["<f4" if arr.dtype == np.float32 else "<f8"]
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        start = base + index[name]["offset"]
        out[start : start + len(raw)] = raw
    _atomic_write(path, bytes(out))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise CorruptionError(f"{path}: too short for a checkpoint")
    magic, version, _reserved, meta_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(
            f"{path}: checkpoint format {version} is incompatible with {VERSION}"
        )
    try:
        meta_doc = json.loads(raw[_PREFIX.size : _PREFIX.size + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable metadata ({exc})") from exc
    base = _align8(_PREFIX.size + meta_len)
    tensors = {}
    for name, entry in meta_doc["tensors"].items():
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"{path}: unknown tensor dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(raw):
            raise CorruptionError(f"{path}: tensor {name!r} runs past end of file")
        tensors[name] = (
            np.frombuffer(raw, dtype=dtype, count=count, offset=start)
            .reshape(shape)
            .astype(dtype.newbyteorder("="), copy=True)
        )
    return Checkpoint(meta=meta_doc["meta"], tensors=tensors)


def _atomic_write(path, blob):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
