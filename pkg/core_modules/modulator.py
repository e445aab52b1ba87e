"""
Modulator Module

This module provides the fixed-rate tick engine and the random modulator that
turns per-electrode stimulation probabilities into pulse events.

Every tick each electrode draws one independent uniform u in [0, 1) and fires
iff u <= p and p > 0, so the mean pulse rate of an electrode is tick_rate * p.
"""

import logging
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, NamedTuple, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from core_modules.errors import GeometryMismatch, DomainError
from core_modules.grid import ELECTRODE_GEOMETRY, FingerId, GridGeometry

logger = logging.getLogger("core.modulator")

TICK_RATE_HZ = 120.0
PULSE_WIDTH_US = 100


class SchedulerConfig(BaseModel):
    """Scheduler settings: tick rate, RNG seed and pulse width."""

    tick_rate_hz: float = Field(default=TICK_RATE_HZ, gt=0)
    rng_seed: int = Field(default=0, ge=0, lt=2 ** 64)
    pulse_width_us: int = Field(default=PULSE_WIDTH_US, gt=0)


class StimulusFrame:
    """Per-electrode stimulation probabilities for one finger at one tick."""

    __slots__ = ("finger", "geometry", "probabilities", "tick")

    def __init__(self, finger: FingerId, probabilities, tick: int = 0,
                 geometry: GridGeometry = ELECTRODE_GEOMETRY):
        array = np.asarray(probabilities, dtype=np.float64).ravel()
        if array.size != geometry.size:
            raise GeometryMismatch(f"Expected {geometry.size} probabilities for {geometry}, got {array.size}")
        if array.size and (not np.all(np.isfinite(array)) or array.min() < 0.0 or array.max() > 1.0):
            raise DomainError("Stimulation probabilities must lie in [0, 1]")
        array = array.copy()
        array.setflags(write=False)
        self.finger = FingerId(finger)
        self.geometry = geometry
        self.probabilities = array
        self.tick = int(tick)

    @classmethod
    def constant(cls, finger: FingerId, p: float, tick: int = 0,
                 geometry: GridGeometry = ELECTRODE_GEOMETRY) -> "StimulusFrame":
        return cls(finger, np.full(geometry.size, p), tick=tick, geometry=geometry)

    def at_tick(self, tick: int) -> "StimulusFrame":
        return StimulusFrame(self.finger, self.probabilities, tick=tick, geometry=self.geometry)

    def __repr__(self) -> str:
        return f"StimulusFrame(finger={self.finger.name}, tick={self.tick}, mean_p={self.probabilities.mean():.3f})"


class PulseEvent(NamedTuple):
    """One electrode firing at one tick."""

    finger: FingerId
    electrode_index: int
    tick: int
    pulse_width_us: int = PULSE_WIDTH_US


@dataclass
class RateStats:
    """Per-electrode pulse counts over a window and the rates they imply."""

    counts: np.ndarray
    window_ticks: int
    tick_rate_hz: float = TICK_RATE_HZ
    held_ticks: int = 0
    idle_ticks: int = 0

    @property
    def rates_hz(self) -> np.ndarray:
        """Empirical rate = count * tick_rate / window."""
        return self.counts * self.tick_rate_hz / self.window_ticks


@dataclass
class SchedulerRun:
    """Output of a scheduler run."""

    events: List[PulseEvent]
    stats: RateStats
    fired: np.ndarray


PULSE_LOG_COLUMNS = ["tick", "finger", "electrode", "pulse_width_us"]


def pulse_log_frame(events: Iterable[PulseEvent]) -> pd.DataFrame:
    """Events as a table ordered by tick, finger, electrode."""
    rows = [(e.tick, int(e.finger), e.electrode_index, e.pulse_width_us) for e in events]
    frame = pd.DataFrame(rows, columns=PULSE_LOG_COLUMNS)
    return frame.sort_values(["tick", "finger", "electrode"], kind="stable").reset_index(drop=True)


def write_pulse_log(events: Iterable[PulseEvent], path: Union[str, Path]) -> int:
    """Write events as CSV ``tick,finger,electrode,pulse_width_us``; returns the row count."""
    frame = pulse_log_frame(events)
    frame.to_csv(path, index=False, lineterminator="\n")
    return len(frame)


def expected_rate(p: float, tick_rate: float = TICK_RATE_HZ) -> float:
    """Mean pulse rate in Hz of an electrode driven at probability p."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"Probability must lie in [0, 1], got {p}")
    return tick_rate * p


def tick(frame: StimulusFrame, rng: np.random.Generator,
         pulse_width_us: int = PULSE_WIDTH_US, tick_index: Optional[int] = None) -> List[PulseEvent]:
    """
    Run the random modulator for one tick.

    Draws are consumed in row-major electrode order, so the result is a pure
    function of the frame and the generator state.

    Args:
        frame: Probabilities to display.
        rng: Seeded generator; advanced by one draw per electrode.
        pulse_width_us: Width stamped on every event.
        tick_index: Tick stamped on events; defaults to frame.tick.

    Returns:
        Events for the electrodes that fired, in electrode order.
    """
    stamp = frame.tick if tick_index is None else tick_index
    draws = rng.random(frame.probabilities.size)
    fired = np.flatnonzero((draws <= frame.probabilities) & (frame.probabilities > 0))
    return [PulseEvent(frame.finger, int(e), stamp, pulse_width_us) for e in fired]


class PulseScheduler:
    """
    Clocked random modulator for one finger in simulated time.

    Frames are consumed one per tick; a missing frame (None, or an exhausted
    stream) holds the previous one. Before the first frame nothing fires.
    """

    def __init__(self, config: Optional[SchedulerConfig] = None,
                 geometry: GridGeometry = ELECTRODE_GEOMETRY,
                 finger: FingerId = FingerId.INDEX):
        self.config = config or SchedulerConfig()
        self.geometry = geometry
        self.finger = FingerId(finger)
        self.rng = np.random.default_rng(self.config.rng_seed)

    def run(self, frames: Iterable[Optional[StimulusFrame]], ticks: int) -> SchedulerRun:
        """
        Schedule ``ticks`` ticks of stimulation.

        The draw matrix is taken in one call; its row-major order is the
        same stream that ``ticks`` successive calls to tick() would consume.

        Raises:
            DomainError: If ticks < 1.
            GeometryMismatch: If a frame's geometry differs from the scheduler's.
        """
        if ticks < 1:
            raise DomainError(f"ticks must be >= 1, got {ticks}")

        n = self.geometry.size
        probabilities = np.zeros((ticks, n))
        current: Optional[np.ndarray] = None
        held = idle = 0
        iterator: Iterator = iter(frames)
        exhausted = False

        for t in range(ticks):
            frame = None
            if not exhausted:
                try:
                    frame = next(iterator)
                except StopIteration:
                    exhausted = True
            if frame is not None:
                if not frame.geometry.same_shape(self.geometry):
                    raise GeometryMismatch(f"Frame geometry {frame.geometry} != scheduler geometry {self.geometry}")
                current = frame.probabilities
            elif current is None:
                idle += 1
            else:
                held += 1
            if current is not None:
                probabilities[t] = current

        if held:
            logger.debug(f"{self.finger.name}: held last frame for {held} of {ticks} ticks")

        fired = (self.rng.random((ticks, n)) <= probabilities) & (probabilities > 0)
        tick_idx, electrode_idx = np.nonzero(fired)
        width = self.config.pulse_width_us
        events = [
            PulseEvent(self.finger, int(e), int(t), width)
            for t, e in zip(tick_idx, electrode_idx)
        ]
        stats = RateStats(
            counts=fired.sum(axis=0),
            window_ticks=ticks,
            tick_rate_hz=self.config.tick_rate_hz,
            held_ticks=held,
            idle_ticks=idle,
        )
        return SchedulerRun(events=events, stats=stats, fired=fired)


def run(frames: Iterable[Optional[StimulusFrame]], ticks: int,
        config: Optional[SchedulerConfig] = None,
        geometry: GridGeometry = ELECTRODE_GEOMETRY,
        finger: FingerId = FingerId.INDEX) -> SchedulerRun:
    """Run a fresh PulseScheduler over a frame stream."""
    return PulseScheduler(config, geometry=geometry, finger=finger).run(frames, ticks)


class ClockedScheduler:
    """
    Wall-clock scheduler: a worker thread ticking at the configured rate.

    Frames arrive on ``inbound``; at each tick the newest queued frame wins and
    is held until replaced. Events are put on ``outbound`` followed by a None
    sentinel when the run ends.
    """

    def __init__(self, config: Optional[SchedulerConfig] = None,
                 geometry: GridGeometry = ELECTRODE_GEOMETRY):
        self.config = config or SchedulerConfig()
        self.geometry = geometry
        self.inbound: "queue.Queue[StimulusFrame]" = queue.Queue()
        self.outbound: "queue.Queue[Optional[PulseEvent]]" = queue.Queue()
        self.ticks_run = 0
        self.late_ticks = 0
        self._rng = np.random.default_rng(self.config.rng_seed)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def submit(self, frame: StimulusFrame) -> None:
        self.inbound.put(frame)

    def start(self, ticks: int) -> None:
        if self._thread is not None:
            raise RuntimeError("ClockedScheduler already started")
        self._thread = threading.Thread(target=self._loop, args=(ticks,), name="pulse-scheduler", daemon=True)
        self._thread.start()
        logger.info(f"Wall-clock scheduler started for {ticks} ticks at {self.config.tick_rate_hz} Hz")

    def stop(self) -> None:
        self._stop.set()

    def join(self, timeout: Optional[float] = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def events(self) -> Iterator[PulseEvent]:
        """Yield events until the worker signals the end of the run."""
        while True:
            event = self.outbound.get()
            if event is None:
                return
            yield event

    def _latest_frame(self, current: Optional[StimulusFrame]) -> Optional[StimulusFrame]:
        while True:
            try:
                current = self.inbound.get_nowait()
            except queue.Empty:
                return current

    def _loop(self, ticks: int) -> None:
        period = 1.0 / self.config.tick_rate_hz
        next_deadline = time.monotonic()
        current: Optional[StimulusFrame] = None
        try:
            for t in range(ticks):
                if self._stop.is_set():
                    break
                now = time.monotonic()
                if now < next_deadline:
                    time.sleep(next_deadline - now)
                elif now - next_deadline > period:
                    self.late_ticks += 1
                next_deadline += period

                current = self._latest_frame(current)
                if current is not None:
                    for event in tick(current, self._rng, self.config.pulse_width_us, tick_index=t):
                        self.outbound.put(event)
                self.ticks_run = t + 1
        finally:
            self.outbound.put(None)
            if self.late_ticks:
                logger.warning(f"Wall-clock scheduler missed {self.late_ticks} tick deadlines")
