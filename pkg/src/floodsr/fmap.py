"""FMAP: a minimal binary raster container.

Layout (all multi-byte fields little-endian, independent of host order):

    bytes 0..3    magic "FMAP"
    bytes 4..5    format version, u16 (currently 1)
    byte  6       kind, u8: 0 water depth (cm), 1 elevation (m), 2 latent
    bytes 7..18   channels, height, width: u32 each
    bytes 19..22  cell size in meters, float32
    bytes 23..    payload: channels*height*width float32 values,
                  row-major within each channel, channels outermost

Writers go through a temp file and an atomic rename so readers never see
a partial raster.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CorruptionError, FormatError

MAGIC = b"FMAP"
VERSION = 1
HEADER = struct.Struct("<4sHBIIIf")

KIND_DEPTH = 0
KIND_ELEVATION = 1
KIND_LATENT = 2
_KINDS = (KIND_DEPTH, KIND_ELEVATION, KIND_LATENT)


@dataclass
class FmapHeader:
    kind: int
    channels: int
    height: int
    width: int
    cell_size_m: float

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ContractError(f"unknown raster kind {self.kind}")
        if min(self.channels, self.height, self.width) < 1:
            raise ContractError("raster dimensions must be >= 1")

    @property
    def value_count(self):
        return self.channels * self.height * self.width


def write_fmap(path, header, payload):
    """Write a raster; payload is [C,H,W] or [H,W] and is stored as float32."""
    payload = np.asarray(payload)
    if payload.ndim == 2:
        payload = payload[None, :, :]
    if payload.ndim != 3:
        raise ContractError("payload must be [C,H,W] or [H,W]")
    if payload.shape != (header.channels, header.height, header.width):
        raise ContractError(
            f"payload shape {payload.shape} disagrees with header "
            f"({header.channels},{header.height},{header.width})"
        )
    blob = HEADER.pack(
        MAGIC,
        VERSION,
        header.kind,
        header.channels,
        header.height,
        header.width,
        header.cell_size_m,
    ) + np.ascontiguousarray(payload, dtype="<f4").tobytes()
    _atomic_write(path, blob)


def read_fmap(path):
    """Read a raster; returns (FmapHeader, float32 array [C,H,W])."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise CorruptionError(f"{path}: truncated header")
        magic, version, kind, channels, height, width, cell = HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        header = FmapHeader(kind, channels, height, width, cell)
        expected = header.value_count * 4
        body = fh.read(expected + 1)
    if len(body) != expected:
        raise CorruptionError(
            f"{path}: payload is {len(body)} bytes, header declares {expected}"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(channels, height, width)
    return header, data.astype(np.float32, copy=True)


def write_depth(path, depths_cm, cell_size):
    write_fmap(path, FmapHeader(KIND_DEPTH, 1, *np.shape(depths_cm), cell_size), depths_cm)


def write_elevation(path, elevation_m, cell_size):
    write_fmap(
        path, FmapHeader(KIND_ELEVATION, 1, *np.shape(elevation_m), cell_size), elevation_m
    )


def read_single_channel(path, expected_kind=None):
    header, data = read_fmap(path)
    if header.channels != 1:
        raise FormatError(f"{path}: expected single-channel raster")
    if expected_kind is not None and header.kind != expected_kind:
        raise FormatError(f"{path}: kind {header.kind}, expected {expected_kind}")
    return header, data[0]


def _atomic_write(path, blob):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".fmap-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
