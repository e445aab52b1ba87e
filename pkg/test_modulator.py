"""Tests for the random modulator and the tick schedulers."""

import math

import numpy as np
import pytest
from scipy.stats import chisquare

from core_modules.errors import DomainError, GeometryMismatch
from core_modules.grid import ELECTRODE_GEOMETRY, FingerId, GridGeometry
from core_modules.modulator import (
    ClockedScheduler,
    PulseScheduler,
    SchedulerConfig,
    StimulusFrame,
    expected_rate,
    run,
    tick,
    write_pulse_log,
)

SINGLE = GridGeometry(width=1, height=1)
PAIR = GridGeometry(width=2, height=1)
# seed of the per-electrode rate-law runs
RATE_LAW_SEED = 2024


def test_expected_rate_examples():
    assert expected_rate(1.0, 120.0) == 120.0
    assert expected_rate(0.0) == 0.0
    assert expected_rate(0.25, 120.0) == 30.0
    with pytest.raises(DomainError):
        expected_rate(1.5)


def test_tick_extremes():
    rng = np.random.default_rng(0)
    assert tick(StimulusFrame.constant(FingerId.INDEX, 0.0), rng) == []
    events = tick(StimulusFrame.constant(FingerId.INDEX, 1.0, tick=7), rng)
    assert [e.electrode_index for e in events] == list(range(20))
    assert {e.tick for e in events} == {7}
    assert {e.pulse_width_us for e in events} == {100}


def test_tick_consumes_one_draw_per_electrode():
    frame = StimulusFrame(FingerId.INDEX, np.linspace(0, 1, 20))
    a, b = np.random.default_rng(9), np.random.default_rng(9)
    tick(frame, a)
    b.random(20)
    assert a.random() == b.random()


def test_single_electrode_half_probability():
    result = run([StimulusFrame.constant(FingerId.INDEX, 0.5, geometry=SINGLE)], 12000,
                 SchedulerConfig(rng_seed=17), geometry=SINGLE)
    sigma = math.sqrt(12000 * 0.25)
    assert abs(int(result.stats.counts[0]) - 6000) <= 3 * sigma


@pytest.mark.parametrize("p", [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0])
def test_rate_law(p):
    ticks = 12000
    result = run([StimulusFrame.constant(FingerId.INDEX, p)], ticks, SchedulerConfig(rng_seed=2024))
    rates = result.stats.rates_hz
    if p == 1.0:
        assert np.all(rates == 120.0)
    elif p == 0.0:
        assert np.all(rates == 0.0)
    else:
        sigma = 120.0 * math.sqrt(p * (1 - p) / ticks)
        pooled = sigma / math.sqrt(rates.size)
        assert abs(rates.mean() - 120.0 * p) <= 3 * pooled

        single = run([StimulusFrame.constant(FingerId.INDEX, p, geometry=SINGLE)], ticks,
                     SchedulerConfig(rng_seed=RATE_LAW_SEED), geometry=SINGLE)
        assert abs(single.stats.rates_hz[0] - 120.0 * p) <= 3 * sigma


def test_quarter_probability_rates():
    result = run([StimulusFrame.constant(FingerId.INDEX, 0.25)], 12000, SchedulerConfig(rng_seed=5))
    sigma = 120.0 * math.sqrt(0.25 * 0.75 / 12000)
    assert abs(result.stats.rates_hz.mean() - 30.0) <= 3 * sigma / math.sqrt(20)
    assert np.all(np.abs(result.stats.rates_hz - 30.0) <= 3 * sigma)


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
def test_inter_pulse_gaps_are_geometric(p):
    result = run([StimulusFrame.constant(FingerId.INDEX, p, geometry=SINGLE)], 100_000,
                 SchedulerConfig(rng_seed=31), geometry=SINGLE)
    gaps = np.diff(np.flatnonzero(result.fired[:, 0]))

    # Bin gaps 1..m and a tail so that every expected count is at least 5.
    probabilities = []
    g = 1
    while True:
        mass = p * (1 - p) ** (g - 1)
        tail = (1 - p) ** g
        if gaps.size * tail < 5:
            probabilities.append(mass + tail)
            break
        probabilities.append(mass)
        g += 1
    last = len(probabilities)
    observed = [np.sum(gaps == n) for n in range(1, last)] + [np.sum(gaps >= last)]
    expected = np.array(probabilities) * gaps.size
    assert chisquare(observed, expected).pvalue > 0.01


def test_electrodes_are_independent():
    result = run([StimulusFrame.constant(FingerId.INDEX, 0.5, geometry=PAIR)], 100_000,
                 SchedulerConfig(rng_seed=8), geometry=PAIR)
    fired = result.fired.astype(float)
    assert abs(np.corrcoef(fired[:, 0], fired[:, 1])[0, 1]) < 0.05
    assert np.mean(fired[:, 0] * fired[:, 1]) == pytest.approx(0.25, abs=0.01)


def test_run_is_deterministic():
    frame = StimulusFrame(FingerId.THUMB, np.linspace(0, 1, 20))
    first = run([frame], 500, SchedulerConfig(rng_seed=99), finger=FingerId.THUMB)
    second = run([frame], 500, SchedulerConfig(rng_seed=99), finger=FingerId.THUMB)
    assert first.events == second.events
    assert all(0 <= e.tick < 500 for e in first.events)
    assert [(e.tick, e.electrode_index) for e in first.events] == sorted((e.tick, e.electrode_index) for e in first.events)


def test_run_holds_last_frame_and_idles_before_first():
    on = StimulusFrame.constant(FingerId.INDEX, 1.0)
    held = run([on, None, None], 5)
    assert held.stats.held_ticks == 4
    assert held.stats.counts.tolist() == [5] * 20

    late = run([None, on], 3)
    assert late.stats.idle_ticks == 1
    assert late.stats.counts.tolist() == [2] * 20


def test_run_validation():
    with pytest.raises(DomainError):
        run([], 0)
    with pytest.raises(GeometryMismatch):
        PulseScheduler().run([StimulusFrame.constant(FingerId.INDEX, 0.5, geometry=PAIR)], 3)
    with pytest.raises(DomainError):
        StimulusFrame.constant(FingerId.INDEX, 1.2)
    with pytest.raises(GeometryMismatch):
        StimulusFrame(FingerId.INDEX, [0.5] * 3)


def test_pulse_log(tmp_path):
    result = run([StimulusFrame.constant(FingerId.INDEX, 1.0)], 2)
    rows = write_pulse_log(reversed(result.events), tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert rows == 40
    assert lines[0] == "tick,finger,electrode,pulse_width_us"
    assert lines[1] == "0,1,0,100"
    assert lines[-1] == "1,1,19,100"


def test_clocked_scheduler_runs_in_wall_clock_time():
    scheduler = ClockedScheduler(SchedulerConfig(tick_rate_hz=1000.0, rng_seed=3), ELECTRODE_GEOMETRY)
    scheduler.submit(StimulusFrame.constant(FingerId.INDEX, 0.0))
    scheduler.submit(StimulusFrame.constant(FingerId.INDEX, 1.0))
    scheduler.start(50)
    events = list(scheduler.events())
    scheduler.join(timeout=5)
    assert scheduler.ticks_run == 50
    assert len(events) == 50 * 20
    assert sorted({e.tick for e in events}) == list(range(50))
