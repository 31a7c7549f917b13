"""Hyperspectral cube container, coordinate grids and the F32C file format.

Cubes are held band-sequentially as a float64 array of shape (L, H, W), so the
spectral unfolding L x N (N = H*W) is a plain reshape.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"F32C"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_MAX_ELEMENTS = 2**31


class FormatError(ValueError):
    """Raised for malformed cube or checkpoint files."""


@dataclass(frozen=True)
class HsiCube:
    data: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"cube data must be 3-D (L, H, W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"cube dimensions must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cube contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dims(self) -> tuple[int, int, int]:
        """(H, W, L), the order used on the command line and in file headers."""
        return self.height, self.width, self.bands

    @classmethod
    def from_hwl(cls, arr) -> "HsiCube":
        """Build from an (H, W, L) array, the layout most imaging code uses."""
        return cls(np.moveaxis(np.asarray(arr, dtype=np.float64), -1, 0))

    def to_hwl(self) -> np.ndarray:
        return np.moveaxis(self.data, 0, -1)


def unfold_spectral(cube: HsiCube) -> np.ndarray:
    """L x N matrix whose row l is band plane l flattened row-major."""
    return cube.data.reshape(cube.bands, -1).copy()


def fold_spectral(mat: np.ndarray, height: int, width: int) -> HsiCube:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != height * width:
        raise ValueError(f"cannot fold {mat.shape} into {height}x{width} planes")
    return HsiCube(mat.reshape(mat.shape[0], height, width))


def axis_coords(n: int) -> np.ndarray:
    """Uniform coordinates spanning [-1, 1]; a single sample sits at 0."""
    if n < 1:
        raise ValueError(f"axis size must be >= 1, got {n}")
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


@dataclass(frozen=True)
class CoordinateGrid:
    spatial: np.ndarray   # (N, 2) rows of (row_coord, col_coord), row-major
    spectral: np.ndarray  # (L, 1)
    source_dims: tuple[int, int, int]

    @property
    def height(self) -> int:
        return self.source_dims[0]

    @property
    def width(self) -> int:
        return self.source_dims[1]

    @property
    def bands(self) -> int:
        return self.source_dims[2]


def make_grid(height: int, width: int, bands: int) -> CoordinateGrid:
    for name, n in (("height", height), ("width", width), ("bands", bands)):
        if int(n) != n or n < 1:
            raise ValueError(f"{name} must be a positive integer, got {n!r}")
    rows = axis_coords(height)
    cols = axis_coords(width)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    spatial = np.stack([rr.ravel(), cc.ravel()], axis=1)
    spectral = axis_coords(bands)[:, None]
    return CoordinateGrid(spatial, spectral, (int(height), int(width), int(bands)))


def cube_to_bytes(cube: HsiCube) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, cube.height, cube.width, cube.bands)
    return header + cube.data.astype("<f4").tobytes()


def cube_from_bytes(buf: bytes) -> HsiCube:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic")
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    _, version, h, w, l = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    for name, n in (("height", h), ("width", w), ("bands", l)):
        if n == 0:
            raise FormatError(f"zero dimension: {name}")
    count = h * w * l
    if count >= _MAX_ELEMENTS:
        raise FormatError(f"dimension overflow: {h}x{w}x{l} elements")
    payload = buf[_HEADER.size:]
    if len(payload) < 4 * count:
        raise FormatError(f"truncated payload: expected {count} floats, got {len(payload) // 4}")
    if len(payload) > 4 * count:
        raise FormatError(f"trailing bytes after payload: {len(payload) - 4 * count}")
    vals = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return HsiCube(vals.reshape(l, h, w))


def atomic_write(path, payload: bytes) -> None:
    """Write to a sibling temp file and rename, so failures leave no partial output."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_cube(cube: HsiCube, path) -> None:
    atomic_write(path, cube_to_bytes(cube))


def read_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        return cube_from_bytes(fh.read())
