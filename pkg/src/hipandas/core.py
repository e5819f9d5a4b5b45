"""Cube / image data model, mode-3 algebra and the HICUBE container format.

Arrays are indexed (row, col, band) throughout the library.  The on-disk
layout is band-sequential (BSQ).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"HICUBE01"
_HEADER_LEN = struct.Struct("<I")


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


class FormatError(ValueError):
    """Raised when a HICUBE file is malformed.  ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class HsiCube:
    """A (height, width, bands) float32 cube."""

    values: np.ndarray
    unit_scaled: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise DimensionError(f"cube must be (h, w, b) with all dims >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cube contains non-finite values")
        if self.unit_scaled and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("unit_scaled cube has values outside [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PanImage:
    """A (height, width) float32 panchromatic image."""

    values: np.ndarray
    unit_scaled: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 3 and v.shape[2] == 1:
            v = v[:, :, 0]
        if v.ndim != 2 or min(v.shape) < 1:
            raise DimensionError(f"PAN image must be (h, w), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("PAN image contains non-finite values")
        if self.unit_scaled and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("unit_scaled PAN image has values outside [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def mode3_product(V: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Combine base images ``V`` (h, w, r) with coefficients ``U`` (b, r).

    Band ``i`` of the result is ``sum_k U[i, k] * V[:, :, k]``.
    """
    V = np.asarray(V)
    U = np.asarray(U)
    if V.ndim != 3 or U.ndim != 2:
        raise DimensionError(f"expected V (h, w, r) and U (b, r), got {V.shape} and {U.shape}")
    if V.shape[2] != U.shape[1]:
        raise DimensionError(f"rank mismatch: V has {V.shape[2]} base images, U has {U.shape[1]} columns")
    return np.einsum("hwr,br->hwb", V, U)


def unfold_mode3(cube: np.ndarray) -> np.ndarray:
    """Return the (bands, height*width) unfolding; row i is band i, row-major."""
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise DimensionError(f"expected a (h, w, b) cube, got shape {cube.shape}")
    return np.ascontiguousarray(np.moveaxis(cube, 2, 0)).reshape(cube.shape[2], -1)


def fold_mode3(matrix: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`unfold_mode3`."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[1] != height * width:
        raise DimensionError(f"cannot fold {matrix.shape} into {height}x{width}")
    return np.moveaxis(matrix.reshape(matrix.shape[0], height, width), 0, 2)


def singular_values(cube: np.ndarray) -> np.ndarray:
    """Descending singular values of the mode-3 unfolding, computed in float64."""
    return np.linalg.svd(unfold_mode3(cube).astype(np.float64), compute_uv=False)


def write_cube(cube, path) -> None:
    """Write a cube (or a 2-D PAN image as bands=1) in HICUBE v1 format."""
    if isinstance(cube, (HsiCube, PanImage)):
        unit_scaled = cube.unit_scaled
        values = cube.values
    else:
        values = np.asarray(cube)
        unit_scaled = bool(values.size and values.min() >= 0.0 and values.max() <= 1.0)
    if values.ndim == 2:
        values = values[:, :, None]
    if values.ndim != 3:
        raise DimensionError(f"cannot write array of shape {values.shape}")
    values = values.astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise ValueError("refusing to write non-finite values")
    h, w, b = values.shape
    header = json.dumps(
        {"height": h, "width": w, "bands": b, "dtype": "f32", "layout": "bsq",
         "unit_scaled": unit_scaled},
    ).encode("utf-8")
    payload = np.ascontiguousarray(np.moveaxis(values, 2, 0)).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER_LEN.pack(len(header)))
        fh.write(header)
        fh.write(payload)


def read_cube(path) -> HsiCube:
    """Read a HICUBE v1 file.  Raises :class:`FormatError` on malformed input."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {MAGIC!r}", 0)
    if len(data) < 12:
        raise FormatError("file too short for header length field", len(data))
    (hlen,) = _HEADER_LEN.unpack_from(data, 8)
    if len(data) < 12 + hlen:
        raise FormatError(f"header declares {hlen} bytes but only {len(data) - 12} follow", 12)
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        h, w, b = int(header["height"]), int(header["width"]), int(header["bands"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid JSON header: {exc}", 12) from exc
    if header.get("dtype") != "f32" or header.get("layout") != "bsq":
        raise FormatError(f"unsupported dtype/layout {header.get('dtype')}/{header.get('layout')}", 12)
    if min(h, w, b) < 1:
        raise FormatError(f"non-positive dimensions {h}x{w}x{b}", 12)
    start = 12 + hlen
    expected = h * w * b * 4
    actual = len(data) - start
    if actual != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {actual}", start)
    flat = np.frombuffer(data, dtype="<f4", offset=start).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise FormatError("non-finite value in payload", start + 4 * int(bad[0]))
    # C order, so reductions sum in the same order as for in-memory cubes
    values = np.ascontiguousarray(np.moveaxis(flat.reshape(b, h, w), 0, 2))
    return HsiCube(values, unit_scaled=bool(header.get("unit_scaled", True)))


def read_pan(path) -> PanImage:
    """Read a single-band HICUBE file as a PAN image."""
    cube = read_cube(path)
    if cube.bands != 1:
        raise DimensionError(f"expected a single-band file, got {cube.bands} bands")
    return PanImage(cube.values[:, :, 0], unit_scaled=cube.unit_scaled)
