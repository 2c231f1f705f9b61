"""On-disk formats: MDSV volumes and MDSVCKPT checkpoints.

MDSV (little-endian)::

    "MDSV" | u8 version=1 | u8 dtype (0=f32, 1=u8 label) | u16 reserved=0
    u32 H, W, D | f32 spacing x3 (mm/voxel, 0 = unknown) | H*W*D elements

Elements use linear index (h*W + w)*D + d, i.e. C order of an (H, W, D) array.

MDSVCKPT::

    "MDSVCKPT" | u32 version=1 | u32 meta_len | meta (UTF-8 JSON)
    u32 count | count x record
    record: u32 name_len | name (UTF-8) | u32 ndim | u32 dims[ndim] | f64 LE data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError

VOLUME_MAGIC = b"MDSV"
VOLUME_VERSION = 1
DTYPE_FLOAT = 0
DTYPE_LABEL = 1
_HEADER = struct.Struct("<4sBBH3I3f")

CKPT_MAGIC = b"MDSVCKPT"
CKPT_VERSION = 1


class FormatError(ContractError):
    pass


@dataclass
class Volume:
    """A 3-D grid with optional spacing; ``spacing`` entries of 0 mean unknown."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ContractError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s < 0 for s in self.spacing):
            raise ContractError(f"spacing must be three nonnegative numbers, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def is_label(self) -> bool:
        return self.data.dtype == np.uint8

    @property
    def known_spacing(self) -> tuple[float, float, float] | None:
        """Spacing in mm, or None when any axis is unknown (metrics then use voxels)."""
        return self.spacing if all(s > 0 for s in self.spacing) else None

    @classmethod
    def label(cls, mask, spacing=(0.0, 0.0, 0.0)) -> "Volume":
        m = np.asarray(mask)
        if not np.isin(m, (0, 1)).all():
            raise ContractError("label volume values must be 0 or 1")
        return cls(m.astype(np.uint8), spacing)

    @classmethod
    def intensity(cls, values, spacing=(0.0, 0.0, 0.0)) -> "Volume":
        return cls(np.asarray(values, dtype=np.float32), spacing)


def encode_volume(vol: Volume) -> bytes:
    if vol.data.dtype == np.uint8:
        code, arr = DTYPE_LABEL, vol.data
    elif vol.data.dtype == np.float32:
        code, arr = DTYPE_FLOAT, vol.data
    else:
        raise FormatError(f"unsupported volume dtype {vol.data.dtype}; use float32 or uint8")
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, code, 0, *vol.shape, *vol.spacing)
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return header + np.ascontiguousarray(little).tobytes()


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated volume header")
    magic, version, code, reserved, H, W, D, sx, sy, sz = _HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise FormatError("bad volume magic")
    if version != VOLUME_VERSION:
        raise FormatError(f"unsupported volume version {version}")
    if reserved != 0:
        raise FormatError("reserved header field must be 0")
    if code not in (DTYPE_FLOAT, DTYPE_LABEL):
        raise FormatError(f"unknown volume dtype code {code}")
    dtype = np.dtype("<f4") if code == DTYPE_FLOAT else np.dtype("u1")
    n = H * W * D
    body = buf[_HEADER.size:]
    if len(body) != n * dtype.itemsize:
        raise FormatError(f"volume body has {len(body)} bytes, expected {n * dtype.itemsize}")
    data = np.frombuffer(body, dtype=dtype).reshape(H, W, D).astype(dtype.newbyteorder("="))
    return Volume(data, (sx, sy, sz))


def write_volume(path, vol: Volume) -> None:
    Path(path).write_bytes(encode_volume(vol))


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


# -- checkpoints ---------------------------------------------------------------

def encode_checkpoint(records, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(records))]
    for name, arr in records:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    """Return ``(records, meta)`` with records an ordered list of (name, float64 array)."""
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, meta_len = take("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(take_bytes(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}") from None
    (count,) = take("<I")
    records = []
    for _ in range(count):
        (name_len,) = take("<I")
        name = take_bytes(name_len).decode("utf-8")
        (ndim,) = take("<I")
        dims = take(f"<{ndim}I")
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take_bytes(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        records.append((name, data))
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint records")
    return records, meta


def write_checkpoint(path, records, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(records, meta))


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
