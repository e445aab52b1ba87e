"""
Psychophysics Module

This module provides the subjective-intensity transfer function S = F(p),
its inverse p = F^-1(S), the deterministic calibration fit from
magnitude-estimation trials, and the pressure-to-probability mapping used by
the leader pipeline.

    F(p)    = k / (1 + exp(a - b*p))
    F^-1(S) = (a - ln(k/S - 1)) / b
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from core_modules.errors import (
    DegenerateFit,
    DomainError,
    InsufficientData,
    NonPositiveMagnitude,
)

logger = logging.getLogger("core.psychophysics")

REFERENCE_MAGNITUDE = 100.0
SCAN_POINTS = 200
SCAN_LOW = 1.0001
SCAN_HIGH = 10.0
SCAN_CAP = 1e5
HEAD_POINTS = 100
HEAD_LOW = 1e-12
HEAD_HIGH = 0.02
MAX_REFINEMENTS = 3
LOG_OFFSET = 64.0
REFINE_XTOL = 1e-9


@dataclass(frozen=True)
class SigmoidModel:
    """Coefficients of the transfer function; b and k must be positive."""

    a: float
    b: float
    k: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b) and math.isfinite(self.k)):
            raise DomainError(f"Model coefficients must be finite: {self}")
        if self.b <= 0:
            raise DomainError(f"Slope b must be positive, got {self.b}")
        if self.k <= 0:
            raise DomainError(f"Asymptote k must be positive, got {self.k}")


@dataclass(frozen=True)
class MagnitudeSample:
    """One magnitude-estimation trial: stimulation probability and reported strength."""

    probability: float
    reported: float

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise DomainError(f"Probability must lie in [0, 1], got {self.probability}")
        if not self.reported > 0:
            raise NonPositiveMagnitude(f"Reported magnitude must be positive, got {self.reported}")


class Inversion(NamedTuple):
    """Result of F^-1: the probability in [0, 1], whether it was clamped, and the raw value."""

    probability: float
    clamped: bool
    raw: float


@dataclass
class FitReport:
    """Diagnostics of a calibration fit."""

    residual_sum: float
    level_means: Dict[float, float]
    scan_trace: List[Tuple[float, float]]
    n_samples: int
    scan_extended: bool = False
    refined: bool = True


def forward(model: SigmoidModel, p: float) -> float:
    """
    Subjective magnitude for stimulation probability p.

    Raises:
        DomainError: If p is outside [0, 1].
    """
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"Probability must lie in [0, 1], got {p}")
    return model.k / (1.0 + math.exp(model.a - model.b * p))


def inverse(model: SigmoidModel, S: float) -> Inversion:
    """
    Stimulation probability that produces magnitude S.

    The raw value is clamped to [0, 1]; ``clamped`` reports whether that
    happened. Near the asymptote the raw value runs to +inf and is returned
    as 1.0.

    Raises:
        DomainError: If S <= 0 or S >= k.
    """
    if not 0.0 < S < model.k:
        raise DomainError(f"Magnitude must lie in (0, {model.k}), got {S}")
    ratio = model.k / S - 1.0
    raw = math.inf if ratio <= 0.0 else (model.a - math.log(ratio)) / model.b
    if raw < 0.0:
        return Inversion(0.0, True, raw)
    if raw > 1.0:
        return Inversion(1.0, True, raw)
    return Inversion(raw, False, raw)


def pressure_to_probability(
    model: SigmoidModel,
    cell: float,
    max_count: float,
    deadzone_fraction: float = 0.02,
    ceiling_fraction: float = 0.95,
) -> float:
    """
    Map one pressure count to a stimulation probability.

    The count is normalised against ``max_count`` and scaled to at most
    ``ceiling_fraction * k`` before inversion; counts below the deadzone map
    to 0.

    Raises:
        DomainError: If cell is outside [0, max_count] or max_count <= 0.
    """
    if max_count <= 0:
        raise DomainError(f"max_count must be positive, got {max_count}")
    if not 0 <= cell <= max_count:
        raise DomainError(f"Cell value {cell} outside [0, {max_count}]")
    if cell <= 0 or cell < deadzone_fraction * max_count:
        return 0.0
    target = (cell / max_count) * ceiling_fraction * model.k
    return inverse(model, target).probability


def probability_map(
    model: SigmoidModel,
    cells: np.ndarray,
    max_count: float,
    deadzone_fraction: float = 0.02,
    ceiling_fraction: float = 0.95,
) -> np.ndarray:
    """Vectorised pressure_to_probability over an array of counts."""
    if max_count <= 0:
        raise DomainError(f"max_count must be positive, got {max_count}")
    cells = np.asarray(cells, dtype=np.float64)
    if cells.size and (cells.min() < 0 or cells.max() > max_count):
        raise DomainError(f"Cell values outside [0, {max_count}]")

    target = (cells / max_count) * ceiling_fraction * model.k
    live = (cells > 0) & (cells >= deadzone_fraction * max_count)
    out = np.zeros_like(target)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = model.k / target[live] - 1.0
        raw = np.where(ratio > 0.0, (model.a - np.log(ratio)) / model.b, np.inf)
    out[live] = np.clip(raw, 0.0, 1.0)
    return out


def _line_fit(p: np.ndarray, s: np.ndarray, k: float) -> Tuple[float, float, float]:
    """Closed-form least squares of y = ln(k/S - 1) against a - b*p; returns (a, b, residual)."""
    # ln(k - S) - ln(S) keeps y exact when k sits just above S.
    y = np.log(k - s) - np.log(s)
    slope, intercept = np.polyfit(p, y, 1)
    residual = float(np.sum((y - (intercept + slope * p)) ** 2))
    return float(intercept), float(-slope), residual


def _refine(
    objective: Callable[[float], float],
    s_max: float,
    lower: float,
    middle: float,
    upper: float,
) -> Optional[float]:
    """
    Golden-section search for k between two scan neighbours.

    The search runs over x = ln(k/max(S) - 1) + LOG_OFFSET so that candidates
    crowding the asymptote are as far apart as distant ones. Returns None when
    the three points do not bracket a minimum.
    """
    def to_x(k: float) -> float:
        return math.log(k / s_max - 1.0) + LOG_OFFSET

    def to_k(x: float) -> float:
        return s_max * (1.0 + math.exp(x - LOG_OFFSET))

    bracket = (to_x(lower), to_x(middle), to_x(upper))
    try:
        result = minimize_scalar(
            lambda x: objective(to_k(x)),
            bracket=bracket,
            method="golden",
            options={"xtol": REFINE_XTOL / (2.0 * bracket[1])},
        )
    except ValueError as e:
        logger.debug(f"Golden-section refinement skipped near k={middle:.6g}: {e}")
        return None
    x = float(result.x)
    if not bracket[0] <= x <= bracket[2]:
        return None
    return to_k(x)


def fit(samples: Sequence[MagnitudeSample]) -> Tuple[SigmoidModel, FitReport]:
    """
    Fit (a, b, k) to magnitude-estimation trials.

    For each k the line y = a - b*p through y_i = ln(k/S_i - 1) is solved in
    closed form. k is scanned on 200 geometric points over [1.0001, 10] * max(S)
    plus a dense run of points between max(S) and 1.02 * max(S), where the
    minimum of near-saturated data is narrow. Every local minimum of the scan
    is refined by golden-section search to a width finer than 1e-9 relative
    in k, and the lowest refined residual wins. Raw trials are fitted;
    per-level means are reported only.

    Args:
        samples: Magnitude-estimation trials.

    Returns:
        The fitted model and a FitReport.

    Raises:
        InsufficientData: Fewer than three distinct probability levels.
        NonPositiveMagnitude: A reported magnitude is not positive.
        DegenerateFit: The data admit no increasing sigmoid.
    """
    if len(samples) < 3:
        raise InsufficientData(f"Need at least 3 samples, got {len(samples)}")

    p = np.array([sample.probability for sample in samples], dtype=np.float64)
    s = np.array([sample.reported for sample in samples], dtype=np.float64)
    if np.any(s <= 0):
        raise NonPositiveMagnitude("All reported magnitudes must be positive")
    levels = np.unique(p)
    if levels.size < 3:
        raise InsufficientData(f"Need at least 3 distinct probability levels, got {levels.size}")

    def objective(k: float) -> float:
        return _line_fit(p, s, k)[2]

    s_max = float(s.max())
    candidates = np.union1d(
        np.geomspace(SCAN_LOW * s_max, SCAN_HIGH * s_max, SCAN_POINTS),
        s_max * (1.0 + np.geomspace(HEAD_LOW, HEAD_HIGH, HEAD_POINTS)),
    )
    trace = [(float(k), objective(k)) for k in candidates]
    best = int(np.argmin([r for _, r in trace]))

    extended = False
    step = (SCAN_HIGH / SCAN_LOW) ** (1.0 / (SCAN_POINTS - 1))
    decade = int(round(math.log(10.0) / math.log(step)))
    while best == len(trace) - 1 and trace[-1][0] < SCAN_CAP * s_max:
        # Minimum sits on the upper edge: push the scan one decade further.
        extended = True
        start = trace[-1][0]
        trace.extend((start * step ** n, objective(start * step ** n)) for n in range(1, decade + 1))
        best = int(np.argmin([r for _, r in trace]))
        logger.warning(f"Scan minimum on the upper edge, extended scan to k={trace[-1][0]:.6g}")

    residuals = [r for _, r in trace]
    minima = [
        i for i in range(1, len(trace) - 1)
        if residuals[i] <= residuals[i - 1] and residuals[i] <= residuals[i + 1]
    ]
    minima = sorted(minima, key=lambda i: residuals[i])[:MAX_REFINEMENTS]

    k_fit, r_fit = trace[best]
    refined = False
    for i in minima:
        k_refined = _refine(objective, s_max, trace[i - 1][0], trace[i][0], trace[i + 1][0])
        if k_refined is None:
            continue
        r_refined = objective(k_refined)
        if r_refined < r_fit:
            k_fit, r_fit, refined = k_refined, r_refined, True

    a, b, residual = _line_fit(p, s, k_fit)
    if not b > 1e-12 * (1.0 + abs(a)):
        raise DegenerateFit(f"Fitted slope b={b:.6g} is not positive; data have no increasing trend")

    level_means = {float(level): float(s[p == level].mean()) for level in levels}
    report = FitReport(
        residual_sum=residual,
        level_means=level_means,
        scan_trace=trace,
        n_samples=len(samples),
        scan_extended=extended,
        refined=refined,
    )
    model = SigmoidModel(a=a, b=b, k=k_fit)
    logger.info(f"Fitted sigmoid a={a:.6g} b={b:.6g} k={k_fit:.6g} residual={residual:.6g}")
    return model, report


def load_samples(path: Union[str, Path]) -> List[MagnitudeSample]:
    """
    Read a calibration CSV with header ``probability,reported``.

    Raises:
        InsufficientData: If the file is empty or lacks the expected columns.
    """
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise InsufficientData(f"Calibration file {path} is empty")
    if not {"probability", "reported"}.issubset(frame.columns):
        raise InsufficientData(f"Calibration file {path} must have columns probability,reported")
    return [
        MagnitudeSample(probability=float(row.probability), reported=float(row.reported))
        for row in frame.itertuples(index=False)
    ]


def save_samples(samples: Sequence[MagnitudeSample], path: Union[str, Path]) -> None:
    frame = pd.DataFrame(
        {"probability": [s.probability for s in samples], "reported": [s.reported for s in samples]}
    )
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def save_model(model: SigmoidModel, residual: float, path: Union[str, Path]) -> None:
    """Write the one-line model record ``a,b,k,residual``."""
    frame = pd.DataFrame([{"a": model.a, "b": model.b, "k": model.k, "residual": residual}])
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def load_model(path: Union[str, Path]) -> SigmoidModel:
    """Read a model record written by save_model."""
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise DomainError(f"Model file {path} is empty")
    if frame.empty or not {"a", "b", "k"}.issubset(frame.columns):
        raise DomainError(f"Model file {path} must contain a,b,k")
    row = frame.iloc[0]
    return SigmoidModel(a=float(row["a"]), b=float(row["b"]), k=float(row["k"]))


def write_fit_trace(report: FitReport, path: Union[str, Path]) -> None:
    """Write the k scan as CSV ``k_candidate,residual``."""
    frame = pd.DataFrame(report.scan_trace, columns=["k_candidate", "residual"])
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
