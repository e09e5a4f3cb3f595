"""Voxel volumes, the GVOL file format and trilinear sampling.

Volumes store their samples as a numpy array indexed ``[i, j, k]`` (x, y, z).
The voxel ``(i, j, k)`` is centred at world point ``(i*sx, j*sy, k*sz)`` mm.
On disk the payload is written x-fastest, then y, then z.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GVOL"
VERSION = 1
DTYPE_SCALAR = 0
DTYPE_LABEL = 1
BACKGROUND = -1024

LABEL_BACKGROUND = 0
LABEL_WALL = 1
LABEL_AIR = 2

_HEADER = struct.Struct("<4sIB3I3d")
_CODES = {DTYPE_SCALAR: np.dtype("<i2"), DTYPE_LABEL: np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised when a GVOL file or an in-memory volume is malformed."""


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(n) <= 0 for n in dims):
        raise VolumeFormatError(f"non-positive dims {tuple(dims)}")
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise VolumeFormatError(f"non-positive spacing {tuple(spacing)}")


@dataclass(frozen=True, eq=False)
class _Volume:
    data: np.ndarray
    spacing: tuple

    _dtype = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeFormatError(f"volume data must be 3-D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(data.shape, spacing)
        data = np.array(data, dtype=self._dtype)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def spacing_array(self) -> np.ndarray:
        return np.asarray(self.spacing, dtype=float)

    def world_to_index(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) / self.spacing_array

    def index_to_world(self, index) -> np.ndarray:
        return np.asarray(index, dtype=float) * self.spacing_array

    def nearest_index(self, point) -> tuple:
        """Index of the voxel whose centre is closest to ``point``, clipped to the grid."""
        idx = np.rint(self.world_to_index(point)).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.dims) - 1)
        return tuple(int(i) for i in idx)

    def linear_index(self, index) -> np.ndarray:
        """x-fastest linear voxel index, used for deterministic tie-breaks."""
        index = np.asarray(index)
        nx, ny, _ = self.dims
        return index[..., 0] + nx * (index[..., 1] + ny * index[..., 2])

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


class ScalarVolume(_Volume):
    """Signed 16-bit intensities (Hounsfield-like)."""

    _dtype = np.int16
    dtype_code = DTYPE_SCALAR


class LabelVolume(_Volume):
    """Unsigned 8-bit tissue codes: 0 background, 1 wall, 2 lumen air."""

    _dtype = np.uint8
    dtype_code = DTYPE_LABEL

    def mask(self, label: int) -> np.ndarray:
        return self.data == label


def write_volume(volume, path) -> None:
    if not isinstance(volume, (ScalarVolume, LabelVolume)):
        raise TypeError(f"cannot write {type(volume).__name__}")
    _check_geometry(volume.dims, volume.spacing)
    header = _HEADER.pack(MAGIC, VERSION, volume.dtype_code, *volume.dims, *volume.spacing)
    payload = volume.data.astype(_CODES[volume.dtype_code]).tobytes(order="F")
    Path(path).write_bytes(header + payload)


def read_volume(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise VolumeFormatError("bad magic")
    if len(raw) < _HEADER.size:
        raise VolumeFormatError("truncated header")
    _, version, code, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VolumeFormatError(f"unsupported version {version}")
    if code not in _CODES:
        raise VolumeFormatError(f"unknown dtype code {code}")
    _check_geometry((nx, ny, nz), (sx, sy, sz))
    dtype = _CODES[code]
    expected = nx * ny * nz * dtype.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")
    cls = ScalarVolume if code == DTYPE_SCALAR else LabelVolume
    return cls(data, (sx, sy, sz))


def sample_trilinear(volume, points, background: float = BACKGROUND) -> np.ndarray:
    """Vectorised trilinear interpolation at world points of shape (..., 3).

    Points outside the hull of voxel centres return ``background``.
    """
    pts = np.asarray(points, dtype=float)
    shape = pts.shape[:-1]
    idx = pts.reshape(-1, 3) / volume.spacing_array
    dims = np.asarray(volume.dims)
    inside = np.all((idx >= 0.0) & (idx <= dims - 1), axis=1) & np.all(np.isfinite(idx), axis=1)
    out = np.full(idx.shape[0], float(background))
    if not inside.any():
        return out.reshape(shape)
    q = idx[inside]
    base = np.minimum(np.floor(q).astype(np.int64), np.maximum(dims - 2, 0))
    frac = q - base
    data = volume.data.astype(float)
    acc = np.zeros(q.shape[0])
    for corner in range(8):
        off = np.array([(corner >> 0) & 1, (corner >> 1) & 1, (corner >> 2) & 1])
        cidx = np.minimum(base + off, dims - 1)
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        acc += w * data[cidx[:, 0], cidx[:, 1], cidx[:, 2]]
    out[inside] = acc
    return out.reshape(shape)


def trilinear_sample(volume, p) -> float:
    return float(sample_trilinear(volume, np.asarray(p, dtype=float)[None, :])[0])
