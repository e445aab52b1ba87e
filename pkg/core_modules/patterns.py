"""
Patterns Module

This module provides synthetic stimuli for the recognition experiments:
static bar patterns at four orientations, back-and-forth scroll sequences of
prism sticks gripped between index finger and thumb, calibration sessions
for magnitude estimation, and the recording file format used to replay
follower-side streams.

All generated pressure data is synthetic; recordings carry a
``meta source synthetic`` header line.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from core_modules.errors import (
    BadHeader,
    CorruptFrame,
    FrameError,
    GeometryMismatch,
    GridError,
    InvalidPattern,
    RecordingError,
    VersionMismatch,
)
from core_modules.grid import MAX_COUNT, SENSOR_GEOMETRY, FingerId, GridGeometry, PressureGrid
from core_modules.psychophysics import MagnitudeSample, SigmoidModel, forward
from core_modules.transport import FollowerSession, WireFrame, decode_from, encode

logger = logging.getLogger("core.patterns")

BAR_ORIENTATIONS = (0, 45, 90, 135)
RIDGE_GAIN = 1.5
RIDGE_HALF_WIDTH = math.pi / 12
MIN_FRAMES_PER_CYCLE = 8
CALIBRATION_LEVELS = (0.1, 0.2, 0.4, 0.6, 0.8, 1.0)

RECORDING_FORMAT = "earlog"
RECORDING_VERSION = 1


# --- static bars ---

@dataclass(frozen=True)
class BarPattern:
    """A straight bar pressed across the sensor at one of four orientations."""

    orientation_deg: int
    thickness_sensels: float = 1.5
    amplitude: int = 40000

    def __post_init__(self):
        if self.orientation_deg not in BAR_ORIENTATIONS:
            raise InvalidPattern(f"Orientation must be one of {BAR_ORIENTATIONS}, got {self.orientation_deg}")
        if not self.thickness_sensels > 0:
            raise InvalidPattern(f"Bar thickness must be positive, got {self.thickness_sensels}")
        if not 0 <= self.amplitude <= MAX_COUNT:
            raise InvalidPattern(f"Amplitude must lie in [0, {MAX_COUNT}], got {self.amplitude}")

    @property
    def label(self) -> str:
        return f"{self.orientation_deg}deg"


def _line_distance(geometry: GridGeometry, orientation_deg: float) -> np.ndarray:
    """Perpendicular distance of every cell centre to the line through the grid centre."""
    theta = math.radians(orientation_deg)
    j, i = np.mgrid[0 : geometry.height, 0 : geometry.width]
    di = i - (geometry.width - 1) / 2.0
    dj = j - (geometry.height - 1) / 2.0
    return np.abs(-di * math.sin(theta) + dj * math.cos(theta))


def generate_bar(pattern: BarPattern, geometry: GridGeometry = SENSOR_GEOMETRY) -> PressureGrid:
    """
    Rasterize a bar by centre-distance threshold.

    A cell gets the full amplitude iff its centre lies within thickness/2 of
    the line; 0 degrees runs along the width axis. Distances are in sensels.
    """
    inside = _line_distance(geometry, pattern.orientation_deg) <= pattern.thickness_sensels / 2.0 + 1e-9
    return PressureGrid(geometry, np.where(inside, pattern.amplitude, 0))


# --- prism scrolls ---

class CrossSection(str, Enum):
    CIRCLE = "circle"
    TRIANGLE = "triangle"
    SQUARE = "square"
    HEXAGON = "hexagon"

    @property
    def vertices(self) -> int:
        return {"circle": 0, "triangle": 3, "square": 4, "hexagon": 6}[self.value]


@dataclass(frozen=True)
class PrismSpec:
    """Stick with a prismatic middle section; dimensions in millimetres."""

    cross_section: CrossSection
    stick_length_mm: float = 150.0
    section_length_mm: float = 28.0
    stick_radius_mm: float = 9.0
    circumradius_mm: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "cross_section", CrossSection(self.cross_section))
        for name in ("stick_length_mm", "section_length_mm", "stick_radius_mm", "circumradius_mm"):
            if not getattr(self, name) > 0:
                raise InvalidPattern(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class ScrollSequence:
    """Index and thumb grids for each frame of a scroll, plus the phase trace."""

    prism: PrismSpec
    frames: List[Tuple[PressureGrid, PressureGrid]]
    frames_per_cycle: int
    cycles: int
    phases: np.ndarray
    ridge_active: np.ndarray
    ticks_per_frame: int = 1

    @property
    def label(self) -> str:
        return self.prism.cross_section.value

    def ridge_intervals_per_cycle(self) -> int:
        """Contiguous ridge windows in one cycle, counted cyclically."""
        active = self.ridge_active[: self.frames_per_cycle]
        if active.all():
            return 1
        rising = active & ~np.roll(active, 1)
        return int(rising.sum())


def scroll_phase(frames_per_cycle: int, cycles: int) -> np.ndarray:
    """Triangle-wave stick angle: 0 to pi and back once per cycle."""
    t = np.arange(frames_per_cycle * cycles)
    x = (t % frames_per_cycle) / frames_per_cycle
    return np.pi * np.where(x < 0.5, 2.0 * x, 2.0 - 2.0 * x)


def ridge_gain(phi: np.ndarray, vertices: int) -> np.ndarray:
    """
    Pressure multiplier for contact angle ``phi``.

    RIDGE_GAIN while a vertex lies within RIDGE_HALF_WIDTH of the contact,
    1 elsewhere and everywhere for a circle.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if vertices == 0:
        return np.ones_like(phi)
    spacing = 2.0 * np.pi / vertices
    offset = np.mod(phi, spacing)
    distance = np.minimum(offset, spacing - offset)
    return np.where(distance <= RIDGE_HALF_WIDTH, RIDGE_GAIN, 1.0)


def generate_scroll(
    spec: PrismSpec,
    frames_per_cycle: int = 720,
    cycles: int = 10,
    amplitude: int = 3150,
    band_thickness_sensels: float = 3.0,
    geometry: GridGeometry = SENSOR_GEOMETRY,
) -> ScrollSequence:
    """
    Synthesize a back-and-forth scroll of a prism stick gripped at 90 degrees.

    The contact is a band along the finger (90 degree orientation) whose
    pressure is multiplied by the ridge gain of the current contact angle.
    The thumb touches the opposite side of the stick, phase-shifted by pi.

    Args:
        spec: The stick.
        frames_per_cycle: Frames per back-and-forth sweep, at least 8.
        cycles: Number of sweeps.
        amplitude: Band pressure away from any vertex.
        band_thickness_sensels: Width of the contact band.
        geometry: Sensor geometry.

    Returns:
        ScrollSequence of frames_per_cycle * cycles frames.

    Raises:
        InvalidPattern: On out-of-range arguments.
    """
    if frames_per_cycle < MIN_FRAMES_PER_CYCLE:
        raise InvalidPattern(f"frames_per_cycle must be >= {MIN_FRAMES_PER_CYCLE}, got {frames_per_cycle}")
    if cycles < 1:
        raise InvalidPattern(f"cycles must be >= 1, got {cycles}")
    if not 0 <= amplitude <= MAX_COUNT:
        raise InvalidPattern(f"Amplitude must lie in [0, {MAX_COUNT}], got {amplitude}")

    band = _line_distance(geometry, 90) <= band_thickness_sensels / 2.0 + 1e-9
    phases = scroll_phase(frames_per_cycle, cycles)
    vertices = spec.cross_section.vertices

    def levels(phi: np.ndarray) -> np.ndarray:
        return np.minimum(np.rint(amplitude * ridge_gain(phi, vertices)), MAX_COUNT).astype(np.int64)

    index_levels = levels(phases)
    thumb_levels = levels(phases + np.pi)

    cache: Dict[int, PressureGrid] = {}

    def grid_for(level: int) -> PressureGrid:
        if level not in cache:
            cache[level] = PressureGrid(geometry, np.where(band, level, 0))
        return cache[level]

    frames = [(grid_for(int(a)), grid_for(int(b))) for a, b in zip(index_levels, thumb_levels)]
    sequence = ScrollSequence(
        prism=spec,
        frames=frames,
        frames_per_cycle=frames_per_cycle,
        cycles=cycles,
        phases=phases,
        ridge_active=ridge_gain(phases, vertices) > 1.0,
    )
    logger.info(f"Generated {spec.cross_section.value} scroll: {len(frames)} frames, {cycles} cycles")
    return sequence


# --- follower streams ---

def bar_frames(grid: PressureGrid, ticks: int, finger: FingerId = FingerId.INDEX,
               session: Optional[FollowerSession] = None) -> List[WireFrame]:
    """One frame per tick holding the same grid."""
    session = session or FollowerSession()
    return [session.next_frame(grid, finger, t) for t in range(ticks)]


def scroll_frames(sequence: ScrollSequence, session: Optional[FollowerSession] = None) -> List[WireFrame]:
    """Index then thumb frame for every scroll frame, stamped with its tick."""
    session = session or FollowerSession()
    out = []
    for n, (index_grid, thumb_grid) in enumerate(sequence.frames):
        tick = n * sequence.ticks_per_frame
        out.append(session.next_frame(index_grid, FingerId.INDEX, tick))
        out.append(session.next_frame(thumb_grid, FingerId.THUMB, tick))
    return out


# --- calibration sessions ---

def generate_calibration_session(
    model: SigmoidModel,
    levels: Sequence[float] = CALIBRATION_LEVELS,
    trials_per_level: int = 5,
    participants: int = 1,
    noise_sigma: float = 0.0,
    seed: int = 0,
    floor: float = 1e-6,
) -> List[MagnitudeSample]:
    """
    Simulate magnitude-estimation sessions against a ground-truth model.

    Each participant sees every level ``trials_per_level`` times in a seeded
    random order and reports F(p) plus Gaussian noise of ``noise_sigma``,
    floored at ``floor``.
    """
    if trials_per_level < 1 or participants < 1:
        raise InvalidPattern("trials_per_level and participants must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(participants):
        order = rng.permutation(np.repeat(np.asarray(levels, dtype=np.float64), trials_per_level))
        noise = rng.normal(0.0, noise_sigma, order.size) if noise_sigma > 0 else np.zeros(order.size)
        for p, eps in zip(order, noise):
            reported = max(forward(model, float(p)) + float(eps), floor)
            samples.append(MagnitudeSample(probability=float(p), reported=reported))
    logger.info(f"Generated calibration session: {len(samples)} trials over {len(levels)} levels")
    return samples


# --- recordings ---

@dataclass
class Recording:
    """Header of a recording file plus its decoded frames."""

    geometry: GridGeometry
    tick_rate: float = 120.0
    metadata: Dict[str, str] = field(default_factory=dict)
    frames: List[WireFrame] = field(default_factory=list)
    version: int = RECORDING_VERSION

    def header_bytes(self) -> bytes:
        lines = [
            f"{RECORDING_FORMAT} {self.version}",
            f"geometry {self.geometry.width}x{self.geometry.height}",
            f"tick_rate {self.tick_rate:g}",
        ]
        lines += [f"meta {key} {value}" for key, value in self.metadata.items()]
        return ("\n".join(lines) + "\n\n").encode("utf-8")


def record(frames: Iterable[WireFrame], path: Union[str, Path], geometry: GridGeometry,
           tick_rate: float = 120.0, metadata: Optional[Dict[str, str]] = None) -> int:
    """
    Write frames to a recording file.

    Returns:
        Number of frames written.

    Raises:
        GeometryMismatch: If a frame's shape differs from ``geometry``.
        RecordingError: If frames are not tick-ordered.
    """
    meta = {"source": "synthetic"}
    meta.update(metadata or {})
    for key, value in meta.items():
        if not key or any(c.isspace() for c in key) or "\n" in str(value):
            raise RecordingError(f"Invalid metadata entry {key!r}")

    header = Recording(geometry=geometry, tick_rate=tick_rate, metadata=meta)
    count = 0
    last_tick = -1
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.header_bytes())
        for frame in frames:
            if (frame.width, frame.height) != (geometry.width, geometry.height):
                raise GeometryMismatch(
                    f"Frame {frame.width}x{frame.height} does not match recording geometry {geometry}"
                )
            if frame.tick < last_tick:
                raise RecordingError(f"Frame tick {frame.tick} precedes {last_tick}")
            last_tick = frame.tick
            f.write(encode(frame))
            count += 1
    logger.info(f"Recorded {count} frames to {path}")
    return count


def _parse_header(data: bytes) -> Tuple[Recording, int]:
    end = data.find(b"\n\n")
    if end < 0:
        raise BadHeader("Recording header is not terminated by a blank line")
    try:
        lines = data[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise BadHeader("Recording header is not valid UTF-8")

    first = lines[0].split()
    if len(first) != 2 or first[0] != RECORDING_FORMAT:
        raise BadHeader(f"Not a recording file: {lines[0]!r}")
    try:
        version = int(first[1])
    except ValueError:
        raise BadHeader(f"Bad format version {first[1]!r}")
    if version != RECORDING_VERSION:
        raise VersionMismatch(f"Recording version {version} is not supported")

    geometry = None
    tick_rate = None
    metadata: Dict[str, str] = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        try:
            if key == "geometry":
                w, h = rest.split("x")
                geometry = GridGeometry(width=int(w), height=int(h))
            elif key == "tick_rate":
                tick_rate = float(rest)
            elif key == "meta":
                meta_key, _, value = rest.partition(" ")
                metadata[meta_key] = value
            else:
                raise BadHeader(f"Unknown header line {line!r}")
        except (ValueError, GridError) as e:
            raise BadHeader(f"Bad header line {line!r}: {e}")
    if geometry is None or tick_rate is None or not tick_rate > 0:
        raise BadHeader("Recording header needs geometry and a positive tick_rate")
    return Recording(geometry=geometry, tick_rate=tick_rate, metadata=metadata, version=version), end + 2


def _body(data: bytes, offset: int, header: Recording, wall_clock: bool) -> Iterator[WireFrame]:
    start = time.monotonic()
    first_tick: Optional[int] = None
    while offset < len(data):
        try:
            frame, offset = decode_from(data, offset)
        except FrameError as e:
            raise CorruptFrame(f"Frame at byte {offset}: {type(e).__name__}: {e}")
        if (frame.width, frame.height) != (header.geometry.width, header.geometry.height):
            raise CorruptFrame(f"Frame {frame.width}x{frame.height} does not match header geometry {header.geometry}")
        if wall_clock:
            first_tick = frame.tick if first_tick is None else first_tick
            delay = start + (frame.tick - first_tick) / header.tick_rate - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        yield frame


def replay(path: Union[str, Path], wall_clock: bool = False) -> Tuple[Recording, Iterator[WireFrame]]:
    """
    Open a recording.

    The header is validated immediately; body frames are decoded lazily, so a
    truncated file yields every complete frame before raising CorruptFrame.
    In wall-clock mode frames are paced by tick at the header's tick rate.

    Returns:
        The header (with an empty frame list) and an iterator over frames.

    Raises:
        BadHeader, VersionMismatch: On an invalid header.
    """
    data = Path(path).read_bytes()
    header, offset = _parse_header(data)
    return header, _body(data, offset, header, wall_clock)


def load_recording(path: Union[str, Path]) -> Recording:
    """Read a whole recording into memory."""
    header, frames = replay(path)
    header.frames = list(frames)
    return header
