"""Canonical 3D grid model and bit-exact VGF file I/O.

Three scalar-grid kinds share one geometry model (:class:`Grid3`):

* :class:`Volume` - CT attenuation in Hounsfield units (file dtype i16),
* :class:`ProbMap` - per-voxel probabilities in [0, 1] (file dtype f32),
* :class:`Mask` - binary segmentations (file dtype u8).

The VGF format is a minimal self-describing container: UTF-8 header
lines ``VGF1``, ``dims=nx ny nz``, ``spacing=sx sy sz``,
``origin=ox oy oz``, ``dtype=...``, ``end`` (each ``\\n``-terminated),
followed immediately by raw little-endian samples, x varying fastest,
then y, then z. Rewriting a freshly read file reproduces its bytes
exactly.

Voxel ``(ix, iy, iz)`` is centered at ``origin + index * spacing`` (mm).
In-memory sample arrays are float64 for Volume/ProbMap (Volume samples
are quantized to the nearest integer HU when written) and uint8 for
Mask, all with shape ``(nx, ny, nz)``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .kernels import gather_linear, gather_nearest

MAGIC = "VGF1"
_I16_MIN, _I16_MAX = -32768, 32767


class GridFileError(ValueError):
    """Raised for malformed or inconsistent VGF files."""


@dataclass(frozen=True)
class Grid3:
    """Regular 3D sampling grid: voxel counts, spacing, and origin (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("dims, spacing, and origin must each have 3 entries")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"all spacings must be positive, got {spacing}")
        if any(not np.isfinite(o) for o in origin):
            raise ValueError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def voxel_to_mm(self, indices) -> np.ndarray:
        """Map (continuous) voxel indices, shape (..., 3), to mm points."""
        idx = np.asarray(indices, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def mm_to_voxel(self, points) -> np.ndarray:
        """Map mm points, shape (..., 3), to continuous voxel indices."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_centers(self) -> np.ndarray:
        """All voxel centers in mm, shape (nvoxels, 3), x fastest."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack(
            [ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")], axis=1
        )
        return self.voxel_to_mm(idx)


def _as_shaped(grid: Grid3, samples, dtype) -> np.ndarray:
    arr = np.asarray(samples, dtype=dtype)
    if arr.ndim == 1:
        if arr.size != grid.voxel_count:
            raise ValueError(
                f"sample count {arr.size} != nx*ny*nz = {grid.voxel_count}"
            )
        arr = arr.reshape(grid.dims, order="F")
    elif arr.shape != grid.dims:
        raise ValueError(f"sample shape {arr.shape} != grid dims {grid.dims}")
    return arr


class _GridScalars:
    """Shared behavior of the three grid kinds. Instances are immutable."""

    _fill_value = 0.0

    def __init__(self, grid: Grid3, samples):
        self.grid = grid
        self.data = self._validate(_as_shaped(grid, samples, self._dtype))
        self.data.flags.writeable = False

    def _validate(self, data: np.ndarray) -> np.ndarray:
        return data

    @property
    def samples(self) -> np.ndarray:
        """Flat sample vector in file order (x fastest)."""
        return self.data.ravel(order="F")

    def same_grid(self, other) -> bool:
        return self.grid == other.grid

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.grid.dims}, spacing={self.grid.spacing})"


class Volume(_GridScalars):
    """HU attenuation image. Values must fit a signed 16-bit integer."""

    _dtype = np.float64
    _fill_value = -1024.0

    def _validate(self, data):
        if not np.all(np.isfinite(data)):
            raise ValueError("volume samples must be finite")
        if data.size and (data.min() < _I16_MIN or data.max() > _I16_MAX):
            raise ValueError("volume samples must fit in signed 16-bit range")
        return data


class ProbMap(_GridScalars):
    """Per-voxel probabilities in [0, 1]."""

    _dtype = np.float64
    _fill_value = 0.0

    def _validate(self, data):
        if not np.all(np.isfinite(data)):
            raise ValueError("probability out of range: non-finite sample")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("probability out of range: samples must lie in [0, 1]")
        return data


class Mask(_GridScalars):
    """Binary segmentation; samples are exactly 0 or 1."""

    _dtype = np.uint8
    _fill_value = 0

    def __init__(self, grid: Grid3, samples):
        arr = np.asarray(samples)
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        elif not np.issubdtype(arr.dtype, np.integer):
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("mask samples must be 0 or 1")
            arr = arr.astype(np.uint8)
        super().__init__(grid, arr)

    def _validate(self, data):
        if data.size and not np.all((data == 0) | (data == 1)):
            raise ValueError("mask samples must be 0 or 1")
        return data

    @property
    def bool_data(self) -> np.ndarray:
        return self.data != 0


_DTYPE_TAGS = {Volume: "i16", ProbMap: "f32", Mask: "u8"}
_TAG_NUMPY = {"i16": "<i2", "f32": "<f4", "u8": "u1"}


def _format_triplet(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_grid_file(obj, path) -> None:
    """Write a Volume/ProbMap/Mask to `path` in VGF format.

    Volume samples are rounded to the nearest integer HU (the file dtype
    is i16); ProbMap samples are stored as f32. Reading a written file
    and writing it again produces identical bytes.
    """
    tag = _DTYPE_TAGS.get(type(obj))
    if tag is None:
        raise TypeError(f"cannot write object of type {type(obj).__name__}")
    grid = obj.grid
    header = (
        f"{MAGIC}\n"
        f"dims={grid.dims[0]} {grid.dims[1]} {grid.dims[2]}\n"
        f"spacing={_format_triplet(grid.spacing)}\n"
        f"origin={_format_triplet(grid.origin)}\n"
        f"dtype={tag}\n"
        f"end\n"
    )
    if tag == "i16":
        payload = np.rint(obj.data).astype("<i2")
    else:
        payload = obj.data.astype(_TAG_NUMPY[tag])
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(payload.tobytes(order="F"))


def _parse_header_line(line: bytes, key: str, count: int, caster):
    text = line.decode("utf-8", errors="replace").rstrip("\n")
    prefix = key + "="
    if not text.startswith(prefix):
        raise GridFileError(f"malformed header: expected '{key}=' line, got {text!r}")
    parts = text[len(prefix):].split()
    if len(parts) != count:
        raise GridFileError(f"malformed header: '{key}' needs {count} values")
    try:
        return tuple(caster(p) for p in parts)
    except ValueError as exc:
        raise GridFileError(f"malformed header: bad '{key}' value") from exc


def read_grid_file(path):
    """Read a VGF file; the dtype tag selects the returned kind.

    i16 -> Volume, f32 -> ProbMap, u8 -> Mask. Raises GridFileError on a
    malformed header or payload, and ValueError when samples violate the
    kind's invariants (probability outside [0, 1], non-binary mask).
    """
    with open(path, "rb") as fh:
        reader = io.BufferedReader(fh) if not isinstance(fh, io.BufferedReader) else fh
        magic = reader.readline()
        if magic.rstrip(b"\n") != MAGIC.encode():
            raise GridFileError(f"malformed header: bad magic {magic!r}")
        dims = _parse_header_line(reader.readline(), "dims", 3, int)
        spacing = _parse_header_line(reader.readline(), "spacing", 3, float)
        origin = _parse_header_line(reader.readline(), "origin", 3, float)
        (tag,) = _parse_header_line(reader.readline(), "dtype", 1, str)
        if tag not in _TAG_NUMPY:
            raise GridFileError(f"malformed header: unknown dtype {tag!r}")
        end = reader.readline()
        if end.rstrip(b"\n") != b"end":
            raise GridFileError("malformed header: missing 'end' line")
        payload = reader.read()

    grid = Grid3(dims, spacing, origin)
    dtype = np.dtype(_TAG_NUMPY[tag])
    expected = grid.voxel_count * dtype.itemsize
    if len(payload) != expected:
        raise GridFileError(
            f"sample-count mismatch: payload has {len(payload)} bytes, "
            f"expected {expected}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    data = flat.reshape(grid.dims, order="F")
    if tag == "i16":
        return Volume(grid, data.astype(np.float64))
    if tag == "f32":
        return ProbMap(grid, data.astype(np.float64))
    return Mask(grid, data.copy())


def sample_at(obj, point, interpolation="linear", fill=None):
    """Sample a Volume or ProbMap at mm coordinates.

    `point` is a single (3,) point or an (N, 3) array. Points outside the
    voxel-center hull return `fill` (default -1024 for Volume, 0 for
    ProbMap). `interpolation` is 'nearest' or 'linear' (trilinear).
    """
    if interpolation not in ("nearest", "linear"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if fill is None:
        fill = obj._fill_value
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    coords = obj.grid.mm_to_voxel(pts.reshape(-1, 3))
    gather = gather_linear if interpolation == "linear" else gather_nearest
    values = gather(obj.data, coords, float(fill))
    return float(values[0]) if single else values
