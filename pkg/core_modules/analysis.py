"""
Analysis Module

This module provides the leader-side observables and the recognition oracle:
stimulation maps accumulated from pulse events, a template classifier for
static patterns, a ridge-count signature classifier for scroll series,
confusion-matrix and timing tabulation, and CSV report emission.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from core_modules.errors import (
    AnalysisError,
    EmptyTemplates,
    GeometryMismatch,
    LabelMismatch,
    SeriesTooShort,
    UndefinedNormalization,
)
from core_modules.grid import ELECTRODE_GEOMETRY, GridGeometry
from core_modules.modulator import TICK_RATE_HZ, PulseEvent

logger = logging.getLogger("core.analysis")

NONE_LABEL = "none"
PEAK_THRESHOLD_FACTOR = 1.25
FLOAT_FORMAT = "%.6g"


@dataclass
class StimulationMap:
    """Per-electrode mean pulse rate in Hz over an observation window."""

    densities: np.ndarray
    window_ticks: int
    geometry: GridGeometry = ELECTRODE_GEOMETRY
    tick_rate: float = TICK_RATE_HZ

    def __post_init__(self):
        self.densities = np.asarray(self.densities, dtype=np.float64).ravel()
        if self.densities.size != self.geometry.size:
            raise GeometryMismatch(f"{self.densities.size} densities for a {self.geometry} map")
        if self.window_ticks < 1:
            raise AnalysisError(f"window_ticks must be >= 1, got {self.window_ticks}")

    @property
    def energy(self) -> float:
        return float(self.densities.sum())

    def as_grid(self) -> np.ndarray:
        return self.densities.reshape(self.geometry.shape)

    def unit(self) -> np.ndarray:
        """
        Densities scaled to unit L2 norm.

        Raises:
            UndefinedNormalization: If every density is zero.
        """
        norm = np.linalg.norm(self.densities)
        if norm == 0.0:
            raise UndefinedNormalization("Cannot unit-normalise an all-zero stimulation map")
        return self.densities / norm


def map_from_counts(counts: np.ndarray, window_ticks: int,
                    geometry: GridGeometry = ELECTRODE_GEOMETRY,
                    tick_rate: float = TICK_RATE_HZ) -> StimulationMap:
    """density = count * tick_rate / window."""
    return StimulationMap(np.asarray(counts) * tick_rate / window_ticks, window_ticks, geometry, tick_rate)


def accumulate_map(events: Iterable[PulseEvent], window_ticks: int,
                   geometry: GridGeometry = ELECTRODE_GEOMETRY,
                   tick_rate: float = TICK_RATE_HZ, start_tick: int = 0) -> StimulationMap:
    """
    Tally pulse events over [start_tick, start_tick + window_ticks).

    Raises:
        AnalysisError: If an event falls outside the window or the electrode range.
    """
    if window_ticks < 1:
        raise AnalysisError(f"window_ticks must be >= 1, got {window_ticks}")
    counts = np.zeros(geometry.size, dtype=np.int64)
    end = start_tick + window_ticks
    for event in events:
        if not start_tick <= event.tick < end:
            raise AnalysisError(f"Event at tick {event.tick} outside window [{start_tick}, {end})")
        if not 0 <= event.electrode_index < geometry.size:
            raise AnalysisError(f"Electrode {event.electrode_index} outside {geometry}")
        counts[event.electrode_index] += 1
    return map_from_counts(counts, window_ticks, geometry, tick_rate)


def expected_map(probabilities: np.ndarray, window_ticks: int = 1,
                 geometry: GridGeometry = ELECTRODE_GEOMETRY,
                 tick_rate: float = TICK_RATE_HZ) -> StimulationMap:
    """Noiseless map: every density is tick_rate * p."""
    return StimulationMap(tick_rate * np.asarray(probabilities, dtype=np.float64), window_ticks, geometry, tick_rate)


@dataclass
class MapSeries:
    """Consecutive stimulation maps of equal window length, one row per map."""

    densities: np.ndarray
    window_ticks: int
    geometry: GridGeometry = ELECTRODE_GEOMETRY
    tick_rate: float = TICK_RATE_HZ

    @classmethod
    def from_fired(cls, fired: np.ndarray, window_ticks: int,
                   geometry: GridGeometry = ELECTRODE_GEOMETRY,
                   tick_rate: float = TICK_RATE_HZ) -> "MapSeries":
        """Bin a (ticks, electrodes) boolean firing matrix; a partial last bin is dropped."""
        bins = fired.shape[0] // window_ticks
        counts = fired[: bins * window_ticks].reshape(bins, window_ticks, -1).sum(axis=1)
        return cls(counts * tick_rate / window_ticks, window_ticks, geometry, tick_rate)

    @classmethod
    def from_probabilities(cls, probabilities: np.ndarray, window_ticks: int,
                           geometry: GridGeometry = ELECTRODE_GEOMETRY,
                           tick_rate: float = TICK_RATE_HZ) -> "MapSeries":
        """Noiseless series from a (ticks, electrodes) probability matrix."""
        bins = probabilities.shape[0] // window_ticks
        mean_p = probabilities[: bins * window_ticks].reshape(bins, window_ticks, -1).mean(axis=1)
        return cls(mean_p * tick_rate, window_ticks, geometry, tick_rate)

    def __len__(self) -> int:
        return self.densities.shape[0]

    @property
    def energy(self) -> np.ndarray:
        return self.densities.sum(axis=1)

    def maps(self) -> List[StimulationMap]:
        return [StimulationMap(row, self.window_ticks, self.geometry, self.tick_rate) for row in self.densities]


def accumulate_series(events: Iterable[PulseEvent], total_ticks: int, window_ticks: int,
                      geometry: GridGeometry = ELECTRODE_GEOMETRY,
                      tick_rate: float = TICK_RATE_HZ) -> MapSeries:
    """Split an event stream into consecutive window_ticks maps."""
    fired = np.zeros((total_ticks, geometry.size), dtype=np.int64)
    for event in events:
        if 0 <= event.tick < total_ticks:
            fired[event.tick, event.electrode_index] += 1
    return MapSeries.from_fired(fired, window_ticks, geometry, tick_rate)


# --- classifiers ---

class Classification(NamedTuple):
    label: str
    scores: Dict[str, float]


@dataclass
class DynamicClassification:
    label: str
    scores: Dict[str, float]
    peaks_per_cycle: float
    peak_bins: List[int] = field(default_factory=list)
    threshold: float = 0.0


def _nearest(scores: Dict[str, float]) -> str:
    # dict order is label order; min() keeps the first of equal scores
    return min(scores, key=scores.get)


def classify_static(stimulation: StimulationMap, templates: Mapping[str, StimulationMap]) -> Classification:
    """
    Nearest template by L2 distance between unit-normalised maps.

    Ties go to the label listed first in ``templates``.

    Raises:
        EmptyTemplates: Fewer than two templates.
        GeometryMismatch: A template's geometry differs from the map's.
        UndefinedNormalization: The map or a template is all zero.
    """
    if len(templates) < 2:
        raise EmptyTemplates(f"Need at least 2 templates, got {len(templates)}")
    for label, template in templates.items():
        if not template.geometry.same_shape(stimulation.geometry):
            raise GeometryMismatch(f"Template {label} is {template.geometry}, map is {stimulation.geometry}")

    observed = stimulation.unit()
    scores = {label: float(np.linalg.norm(observed - template.unit())) for label, template in templates.items()}
    return Classification(_nearest(scores), scores)


def count_peaks(energy: np.ndarray, threshold_factor: float = PEAK_THRESHOLD_FACTOR,
                min_separation: int = 1, prominence_factor: float = 0.0) -> Tuple[List[int], float]:
    """
    Local maxima of a periodic energy trace strictly above threshold_factor * median.

    The trace is treated as a ring of whole cycles. It is cut open in the
    middle of its longest run of sub-threshold bins, so a peak on the
    wrap-around is found exactly once. Peaks closer than ``min_separation``
    bins collapse onto the highest. With ``prominence_factor`` set, a peak
    must also stand prominence_factor * median above its surroundings.

    Returns:
        Peak bin indices within the trace, ascending, and the threshold used.
    """
    energy = np.asarray(energy, dtype=np.float64)
    n = energy.size
    median = float(np.median(energy)) if n else 0.0
    threshold = threshold_factor * median
    height = np.nextafter(threshold, np.inf)
    below = energy < height
    if n == 0 or below.all():
        return [], threshold

    cut = 0
    if below.any():
        # Longest cyclic run of sub-threshold bins; start scanning just after an above-threshold bin.
        first_above = int(np.argmax(~below))
        best_start, best_len, run_start, run_len = 0, 0, 0, 0
        for step in range(1, n + 1):
            b = (first_above + step) % n
            if below[b]:
                if run_len == 0:
                    run_start = b
                run_len += 1
                if run_len > best_len:
                    best_start, best_len = run_start, run_len
            else:
                run_len = 0
        cut = (best_start + best_len // 2) % n

    ring = np.roll(energy, -cut)
    # Closing the ring with its first, sub-threshold bin lets the last bin be a peak.
    prominence = prominence_factor * median if prominence_factor > 0 and median > 0 else None
    peaks, _ = find_peaks(np.append(ring, ring[0]), height=height, distance=max(1, min_separation),
                          prominence=prominence)
    return sorted(int((p + cut) % n) for p in peaks if p < n), threshold


def classify_dynamic(series: MapSeries, templates: Mapping[str, float], cycle_ticks: int,
                     threshold_factor: float = PEAK_THRESHOLD_FACTOR,
                     min_separation_ticks: Optional[int] = None,
                     smoothing_ticks: Optional[int] = None) -> DynamicClassification:
    """
    Classify a scroll by its ridge signature: energy peaks per cycle.

    Only whole cycles are used. The energy trace is first smoothed with a
    cyclic moving average of ``smoothing_ticks`` (default: half a ridge
    window, a twenty-fourth of a cycle). ``min_separation_ticks`` defaults to
    one twelfth of a cycle, the length of a ridge window. Peaks must rise
    (threshold_factor - 1) * median above their surroundings.

    Raises:
        EmptyTemplates: Fewer than two templates.
        SeriesTooShort: The series covers less than one cycle.
    """
    if len(templates) < 2:
        raise EmptyTemplates(f"Need at least 2 signature templates, got {len(templates)}")
    cycle_bins = max(1, int(round(cycle_ticks / series.window_ticks)))
    cycles = len(series) // cycle_bins
    if cycles < 1:
        raise SeriesTooShort(f"Series of {len(series)} maps is shorter than one cycle ({cycle_bins} maps)")

    if min_separation_ticks is None:
        min_separation_ticks = cycle_ticks // 12
    if smoothing_ticks is None:
        smoothing_ticks = cycle_ticks // 24
    separation = max(1, int(round(min_separation_ticks / series.window_ticks)))
    width = max(1, int(round(smoothing_ticks / series.window_ticks)))
    if width % 2 == 0:
        width += 1

    energy = series.energy[: cycles * cycle_bins]
    if width > 1:
        energy = uniform_filter1d(energy, size=width, mode="wrap")
    peaks, threshold = count_peaks(energy, threshold_factor, separation, max(0.0, threshold_factor - 1.0))
    signature = len(peaks) / cycles
    scores = {label: abs(signature - float(expected)) for label, expected in templates.items()}
    label = _nearest(scores)
    logger.debug(f"Scroll signature {signature:.3f} peaks/cycle over {cycles} cycles -> {label}")
    return DynamicClassification(label, scores, signature, peaks, threshold)


# --- tabulation ---

class Trial(NamedTuple):
    true: str
    predicted: str
    duration: float


@dataclass
class ConfusionMatrix:
    """Counts indexed [true, predicted] over an ordered label list."""

    labels: List[str]
    counts: np.ndarray

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def presented(self, label: str) -> int:
        return int(self.counts[self.index(label)].sum())

    def rate(self, true: str, predicted: str) -> float:
        """Fraction of ``true`` trials answered ``predicted``."""
        row = self.index(true)
        total = self.counts[row].sum()
        return float(self.counts[row, self.index(predicted)] / total) if total else 0.0

    def accuracy(self, label: str) -> float:
        return self.rate(label, label)

    @property
    def overall_accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def top_confusion(self, label: str) -> Tuple[str, float]:
        """Most frequent wrong answer for ``label`` (first in label order on ties)."""
        row = self.counts[self.index(label)].copy()
        row[self.index(label)] = 0
        if row.sum() == 0:
            return "", 0.0
        other = self.labels[int(np.argmax(row))]
        return other, self.rate(label, other)


def lower_median(values: Sequence[float]) -> float:
    """Median; for even counts the lower of the two middle values."""
    ordered = sorted(values)
    return float(ordered[(len(ordered) - 1) // 2])


def quartiles(values: Sequence[float]) -> Tuple[float, float, float]:
    """(q1, median, q3), each by the lower-median rule; the halves exclude the middle value."""
    ordered = sorted(values)
    n = len(ordered)
    if n == 1:
        return (ordered[0], ordered[0], ordered[0])
    lower = ordered[: n // 2]
    upper = ordered[(n + 1) // 2 :]
    return (lower_median(lower), lower_median(ordered), lower_median(upper))


@dataclass
class TrialTiming:
    """Recognition durations in seconds, grouped by true label."""

    durations: Dict[str, List[float]] = field(default_factory=dict)

    def add(self, label: str, seconds: float) -> None:
        if not seconds > 0:
            raise AnalysisError(f"Trial duration must be positive, got {seconds}")
        self.durations.setdefault(label, []).append(float(seconds))

    def summary(self) -> pd.DataFrame:
        rows = []
        for label, values in self.durations.items():
            q1, median, q3 = quartiles(values)
            rows.append({"label": label, "n": len(values), "q1": q1, "median": median, "q3": q3,
                         "min": min(values), "max": max(values)})
        return pd.DataFrame(rows, columns=["label", "n", "q1", "median", "q3", "min", "max"])


def tabulate(trials: Sequence[Trial], labels: Optional[Sequence[str]] = None) -> Tuple[ConfusionMatrix, TrialTiming]:
    """
    Tally trials into a confusion matrix and timing summary.

    Without ``labels`` the class set is every label seen, in order of first
    appearance (true labels first). A ``none`` prediction is allowed with
    either form and gets its own row and column.

    Raises:
        AnalysisError: No trials.
        LabelMismatch: A label outside the supplied class set.
    """
    if not trials:
        raise AnalysisError("No trials to tabulate")

    trials = [Trial(*t) for t in trials]
    if labels is None:
        ordered: List[str] = []
        for label in [t.true for t in trials] + [t.predicted for t in trials]:
            if label not in ordered and label != NONE_LABEL:
                ordered.append(label)
    else:
        ordered = list(labels)
        allowed = set(ordered)
        for t in trials:
            if t.true not in allowed:
                raise LabelMismatch(f"True label {t.true!r} not in class set {ordered}")
            if t.predicted not in allowed and t.predicted != NONE_LABEL:
                raise LabelMismatch(f"Predicted label {t.predicted!r} not in class set {ordered}")
    if any(t.predicted == NONE_LABEL for t in trials) and NONE_LABEL not in ordered:
        ordered.append(NONE_LABEL)

    position = {label: n for n, label in enumerate(ordered)}
    counts = np.zeros((len(ordered), len(ordered)), dtype=np.int64)
    timing = TrialTiming()
    for t in trials:
        counts[position[t.true], position[t.predicted]] += 1
        timing.add(t.true, t.duration)

    matrix = ConfusionMatrix(ordered, counts)
    logger.info(f"Tabulated {len(trials)} trials, overall accuracy {matrix.overall_accuracy:.3f}")
    return matrix, timing


def load_trials(path: Union[str, Path]) -> List[Trial]:
    """Read a trial log CSV with header ``true,predicted,duration``."""
    try:
        frame = pd.read_csv(path, dtype={"true": str, "predicted": str}, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise AnalysisError(f"Trial log {path} is empty")
    if not {"true", "predicted", "duration"}.issubset(frame.columns):
        raise AnalysisError(f"Trial log {path} must have columns true,predicted,duration")
    return [Trial(str(r.true), str(r.predicted), float(r.duration)) for r in frame.itertuples(index=False)]


def save_trials(trials: Sequence[Trial], path: Union[str, Path]) -> None:
    frame = pd.DataFrame([t._asdict() for t in trials], columns=list(Trial._fields))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def emit_report(matrix: ConfusionMatrix, timing: TrialTiming, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Write confusion.csv, accuracy.csv and timing.csv.

    Floats carry 6 significant digits and lines end in LF, so identical
    inputs give identical bytes.

    Returns:
        Mapping of report name to written path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / f"{name}.csv" for name in ("confusion", "accuracy", "timing")}

    confusion = pd.DataFrame(matrix.counts, index=matrix.labels, columns=matrix.labels)
    confusion.index.name = "label"
    confusion.to_csv(paths["confusion"], lineterminator="\n")

    rows = []
    for label in matrix.labels:
        presented = matrix.presented(label)
        if not presented:
            continue
        other, other_rate = matrix.top_confusion(label)
        rows.append({
            "label": label,
            "presented": presented,
            "correct": int(matrix.counts[matrix.index(label), matrix.index(label)]),
            "accuracy": matrix.accuracy(label),
            "top_confusion": other,
            "top_confusion_rate": other_rate,
        })
    total = int(matrix.counts.sum())
    rows.append({
        "label": "overall",
        "presented": total,
        "correct": int(np.trace(matrix.counts)),
        "accuracy": matrix.overall_accuracy,
        "top_confusion": "",
        "top_confusion_rate": 0.0,
    })
    pd.DataFrame(rows).to_csv(paths["accuracy"], index=False, float_format=FLOAT_FORMAT, lineterminator="\n")

    timing.summary().to_csv(paths["timing"], index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Report written to {out_dir}")
    return paths
