"""
Grid Module

This module provides the pressure-grid data model, the 2x2 spatial filter
applied on the follower side, and the resampling step that maps the filtered
sensor lattice onto the electrode lattice.

Axis convention: i indexes width (columns), j indexes height (rows); values
are stored row-major with j as the row.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from core_modules.errors import DegenerateGrid, GeometryMismatch, ValueOutOfRange

logger = logging.getLogger("core.grid")

MAX_COUNT = 65535
DEFAULT_ROW_MAP: Tuple[int, ...] = (0, 2, 4, 6, 8)


class FingerId(IntEnum):
    """Fingers instrumented on both gloves; the value is the wire encoding."""
    THUMB = 0
    INDEX = 1
    MIDDLE = 2


@dataclass(frozen=True)
class GridGeometry:
    """Lattice shape and physical spacing of a sensor or electrode array."""

    width: int
    height: int
    pitch_mm: float = 2.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DegenerateGrid(f"Grid dimensions must be >= 1, got {self.width}x{self.height}")
        if not self.pitch_mm > 0:
            raise DegenerateGrid(f"Pitch must be positive, got {self.pitch_mm}")

    @property
    def size(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> Tuple[int, int]:
        """numpy shape (rows, columns)."""
        return (self.height, self.width)

    def same_shape(self, other: "GridGeometry") -> bool:
        return self.width == other.width and self.height == other.height

    def __str__(self) -> str:
        return f"{self.width}x{self.height}"


SENSOR_GEOMETRY = GridGeometry(width=5, height=10, pitch_mm=2.0)
FILTERED_SENSOR_GEOMETRY = GridGeometry(width=4, height=9, pitch_mm=2.0)
ELECTRODE_GEOMETRY = GridGeometry(width=4, height=5, pitch_mm=2.0)


class PressureGrid:
    """
    Immutable rectangular grid of raw pressure counts.

    Values are integer counts in [0, 65535]. The backing array is read-only,
    so a grid can be shared freely between threads.
    """

    __slots__ = ("geometry", "values")

    def __init__(self, geometry: GridGeometry, values: Iterable):
        array = np.asarray(values)
        if array.ndim == 1:
            if array.size != geometry.size:
                raise GeometryMismatch(
                    f"Expected {geometry.size} values for a {geometry} grid, got {array.size}"
                )
            array = array.reshape(geometry.shape)
        elif array.shape != geometry.shape:
            raise GeometryMismatch(f"Array shape {array.shape} does not match geometry {geometry}")

        if array.size and not np.issubdtype(array.dtype, np.integer):
            if not np.all(np.isfinite(array)) or not np.all(array == np.round(array)):
                raise ValueOutOfRange("Pressure samples must be integral counts")
        if array.size and (array.min() < 0 or array.max() > MAX_COUNT):
            raise ValueOutOfRange(
                f"Pressure samples must lie in [0, {MAX_COUNT}], got [{array.min()}, {array.max()}]"
            )

        array = array.astype(np.int64, copy=True)
        array.setflags(write=False)
        object.__setattr__(self, "geometry", geometry)
        object.__setattr__(self, "values", array)

    def __setattr__(self, name, value):
        raise AttributeError("PressureGrid is immutable")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], pitch_mm: float = 2.0) -> "PressureGrid":
        """Build a grid from a list of rows (j-major)."""
        array = np.asarray(rows)
        if array.ndim != 2:
            raise GeometryMismatch("Rows must form a rectangular 2-D array")
        height, width = array.shape
        return cls(GridGeometry(width=width, height=height, pitch_mm=pitch_mm), array)

    @classmethod
    def constant(cls, geometry: GridGeometry, value: int) -> "PressureGrid":
        return cls(geometry, np.full(geometry.shape, value, dtype=np.int64))

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "PressureGrid":
        return cls.constant(geometry, 0)

    @property
    def width(self) -> int:
        return self.geometry.width

    @property
    def height(self) -> int:
        return self.geometry.height

    def at(self, i: int, j: int) -> int:
        """Sample at column i, row j."""
        return int(self.values[j, i])

    def flat(self) -> Tuple[int, ...]:
        """Row-major samples as plain ints."""
        return tuple(int(v) for v in self.values.ravel())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PressureGrid):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.geometry, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"PressureGrid({self.geometry}, max={int(self.values.max()) if self.values.size else 0})"


def spatial_filter(grid: PressureGrid) -> PressureGrid:
    """
    Average every 2x2 neighbourhood of the input grid.

    out[i, j] = (in[i, j] + in[i+1, j] + in[i, j+1] + in[i+1, j+1]) / 4,
    rounded half-up to an integer count.

    Args:
        grid: Input grid, at least 2x2.

    Returns:
        Grid with geometry (width - 1, height - 1) and the same pitch.

    Raises:
        DegenerateGrid: If either dimension is smaller than 2.
    """
    if grid.width < 2 or grid.height < 2:
        raise DegenerateGrid(f"Spatial filter needs at least a 2x2 grid, got {grid.geometry}")

    v = grid.values
    sums = v[:-1, :-1] + v[:-1, 1:] + v[1:, :-1] + v[1:, 1:]
    # Integer half-up rounding of sums / 4.
    filtered = (sums + 2) // 4
    geometry = GridGeometry(width=grid.width - 1, height=grid.height - 1, pitch_mm=grid.geometry.pitch_mm)
    return PressureGrid(geometry, filtered)


def resample_to_electrodes(
    filtered: PressureGrid,
    target: GridGeometry = ELECTRODE_GEOMETRY,
    row_map: Optional[Sequence[int]] = None,
) -> PressureGrid:
    """
    Decimate a filtered sensor grid onto the electrode lattice.

    Columns pass through unchanged; rows are picked by ``row_map``. Without an
    explicit map only the documented presets are accepted (4x9 -> 4x5 using
    rows 0, 2, 4, 6, 8).

    Args:
        filtered: Filtered sensor grid.
        target: Electrode geometry.
        row_map: Optional source row for each target row.

    Returns:
        Grid with the target geometry.

    Raises:
        GeometryMismatch: If the shapes do not fit the presets or the row map.
    """
    if row_map is None:
        if not (filtered.geometry.same_shape(FILTERED_SENSOR_GEOMETRY) and target.same_shape(ELECTRODE_GEOMETRY)):
            raise GeometryMismatch(
                f"No row map supplied and {filtered.geometry} -> {target} is not the 4x9 -> 4x5 preset"
            )
        row_map = DEFAULT_ROW_MAP

    rows = tuple(int(r) for r in row_map)
    if filtered.width != target.width:
        raise GeometryMismatch(f"Width must pass through unchanged: {filtered.width} != {target.width}")
    if len(rows) != target.height:
        raise GeometryMismatch(f"Row map has {len(rows)} entries for a target height of {target.height}")
    if any(r < 0 or r >= filtered.height for r in rows):
        raise GeometryMismatch(f"Row map {rows} indexes outside 0..{filtered.height - 1}")

    return PressureGrid(target, filtered.values[list(rows), :])
