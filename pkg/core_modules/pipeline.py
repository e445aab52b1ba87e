"""
Pipeline Module

This module wires the stages of the tactile transfer together:

    recording -> follower 2x2 filter -> wire frames -> link -> leader session
    -> electrode resampling -> intensity mapping -> pulse schedulers
    -> stimulation maps -> recognition -> report

TactilePipeline owns the leader-side mapping. Experiment runs whole corpora of
trials, each with its own seed derived from the run seed, so a run is
reproducible trial by trial.
"""

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core_modules.analysis import (
    NONE_LABEL,
    ConfusionMatrix,
    MapSeries,
    StimulationMap,
    Trial,
    TrialTiming,
    classify_dynamic,
    classify_static,
    emit_report,
    expected_map,
    map_from_counts,
    save_trials,
    tabulate,
)
from core_modules.config_loader import MappingSettings, RunConfig, Settings
from core_modules.errors import FrameError, InvalidPattern, RecordingError, UndefinedNormalization
from core_modules.grid import ELECTRODE_GEOMETRY, FingerId, GridGeometry, PressureGrid, resample_to_electrodes, spatial_filter
from core_modules.modulator import (
    PULSE_LOG_COLUMNS,
    ClockedScheduler,
    PulseEvent,
    PulseScheduler,
    RateStats,
    SchedulerConfig,
    SchedulerRun,
    StimulusFrame,
    pulse_log_frame,
)
from core_modules.patterns import (
    BAR_ORIENTATIONS,
    BarPattern,
    CrossSection,
    PrismSpec,
    bar_frames,
    generate_bar,
    generate_scroll,
    load_recording,
    scroll_frames,
)
from core_modules.psychophysics import SigmoidModel, probability_map
from core_modules.transport import (
    Delivery,
    FollowerSession,
    LeaderSession,
    LinkModel,
    LinkStats,
    SessionState,
    SimulatedLink,
    UdpFrameChannel,
    WireFrame,
    decode,
)

logger = logging.getLogger("core.pipeline")

STATIC_LABELS = tuple(f"{deg}deg" for deg in BAR_ORIENTATIONS)
DYNAMIC_LABELS = tuple(section.value for section in CrossSection)

# Seed-derivation stream keys.
_LINK, _SCHEDULER, _ORDER, _TRIAL = 1, 2, 3, 4


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit seed for a sub-stream of a run."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0])


class TactilePipeline:
    """Leader-side mapping from filtered sensor grids to stimulus frames."""

    def __init__(self, model: SigmoidModel, mapping: Optional[MappingSettings] = None,
                 electrode_geometry: GridGeometry = ELECTRODE_GEOMETRY,
                 row_map: Optional[Sequence[int]] = None,
                 scheduler: Optional[SchedulerConfig] = None):
        self.model = model
        self.mapping = mapping or MappingSettings()
        self.electrode_geometry = electrode_geometry
        self.row_map = tuple(row_map) if row_map is not None else None
        self.scheduler = scheduler or SchedulerConfig()
        self._probabilities: Dict[PressureGrid, np.ndarray] = {}
        self._filtered: Dict[Tuple[int, int, Tuple[int, ...]], PressureGrid] = {}

    @classmethod
    def from_settings(cls, settings: Settings, model: Optional[SigmoidModel] = None) -> "TactilePipeline":
        return cls(
            model=model or settings.model.build(),
            mapping=settings.mapping,
            electrode_geometry=settings.geometry.electrode.build(),
            row_map=settings.geometry.row_map,
            scheduler=settings.scheduler,
        )

    def probabilities(self, filtered: PressureGrid) -> np.ndarray:
        """Row-major stimulation probabilities for a filtered sensor grid."""
        cached = self._probabilities.get(filtered)
        if cached is None:
            electrodes = resample_to_electrodes(filtered, self.electrode_geometry, self.row_map)
            cached = probability_map(
                self.model,
                electrodes.values.ravel(),
                self.mapping.max_count,
                self.mapping.deadzone_fraction,
                self.mapping.ceiling_fraction,
            )
            self._probabilities[filtered] = cached
        return cached

    def map_grid(self, filtered: PressureGrid, finger: FingerId = FingerId.INDEX, tick: int = 0) -> StimulusFrame:
        return StimulusFrame(finger, self.probabilities(filtered), tick=tick, geometry=self.electrode_geometry)

    def filter_frame(self, frame: WireFrame) -> PressureGrid:
        """Follower-side 2x2 filter of a recorded sensor frame."""
        key = (frame.width, frame.height, frame.values)
        filtered = self._filtered.get(key)
        if filtered is None:
            filtered = spatial_filter(frame.to_grid())
            self._filtered[key] = filtered
        return filtered

    def expected_static_map(self, raw: PressureGrid) -> StimulationMap:
        """Noiseless stimulation map of a sensor grid held for a whole window."""
        return expected_map(self.probabilities(spatial_filter(raw)), 1, self.electrode_geometry,
                            self.scheduler.tick_rate_hz)

    def follower_stream(self, frames: Sequence[WireFrame], ticks: int) -> List[Tuple[int, bytes]]:
        """Filter and re-encode recorded frames with tick < ticks, as the follower sends them."""
        session = FollowerSession()
        return [
            (frame.tick, session.encode_grid(self.filter_frame(frame), frame.finger, frame.tick))
            for frame in frames
            if frame.tick < ticks
        ]

    def run_trial(self, frames: Sequence[WireFrame], ticks: int, seed: int,
                  link: Optional[LinkModel] = None, mode: str = "simulated-time",
                  udp_port: Optional[int] = None) -> "TrialRun":
        """
        Replay one recorded stream through the link and the leader.

        Each finger present in ``frames`` gets its own scheduler and seed.

        Args:
            frames: Recorded sensor frames, tick-ordered.
            ticks: Observation window.
            seed: Trial seed; link and scheduler seeds derive from it.
            link: Link fault model (its own rng_seed is replaced).
            mode: "simulated-time" or "wall-clock".
            udp_port: Carry frames over loopback UDP instead of the simulated link.

        Returns:
            TrialRun with per-finger scheduler output and session counters.
        """
        fingers = sorted({frame.finger for frame in frames}) or [FingerId.INDEX]
        encoded = self.follower_stream(frames, ticks)
        link_model = (link or LinkModel()).model_copy(update={"rng_seed": derive_seed(seed, _LINK)})

        if udp_port is not None:
            deliveries, stats = _udp_deliveries(encoded, udp_port, link_model.latency_ticks)
        else:
            channel = SimulatedLink(link_model)
            for send_tick, data in encoded:
                channel.send(send_tick, data)
            deliveries, stats = channel.flush(), channel.stats

        configs = {
            f: self.scheduler.model_copy(update={"rng_seed": derive_seed(seed, _SCHEDULER, int(f))})
            for f in fingers
        }
        leader = LeaderSession()
        if mode == "wall-clock":
            runs = self._run_wall_clock(deliveries, leader, configs, ticks)
        else:
            runs = self._run_simulated(deliveries, leader, configs, ticks)

        state = leader.state
        logger.debug(
            f"Trial: {state.handed_off} frames handed off, {state.gap_count} gaps, "
            f"{state.out_of_order_count} stale, {stats.dropped} dropped"
        )
        return TrialRun(ticks=ticks, runs=runs, session=state, link=stats, geometry=self.electrode_geometry)

    def _stimulus(self, leader: LeaderSession, delivery: Delivery, tick: int) -> Optional[StimulusFrame]:
        received = leader.ingest_bytes(delivery.item)
        if received is None:
            return None
        finger, grid = received
        return self.map_grid(grid, finger, tick)

    def _run_simulated(self, deliveries: List[Delivery], leader: LeaderSession,
                       configs: Dict[FingerId, SchedulerConfig], ticks: int) -> Dict[FingerId, SchedulerRun]:
        per_tick: Dict[FingerId, List[Optional[StimulusFrame]]] = {f: [None] * ticks for f in configs}
        for delivery in deliveries:
            if delivery.deliver_tick >= ticks:
                break
            frame = self._stimulus(leader, delivery, delivery.deliver_tick)
            if frame is not None and frame.finger in per_tick:
                # Latest delivery within a tick wins.
                per_tick[frame.finger][delivery.deliver_tick] = frame
        return {
            f: PulseScheduler(configs[f], self.electrode_geometry, f).run(per_tick[f], ticks)
            for f in configs
        }

    def _run_wall_clock(self, deliveries: List[Delivery], leader: LeaderSession,
                        configs: Dict[FingerId, SchedulerConfig], ticks: int) -> Dict[FingerId, SchedulerRun]:
        schedulers = {f: ClockedScheduler(configs[f], self.electrode_geometry) for f in configs}
        for scheduler in schedulers.values():
            scheduler.start(ticks)

        period = 1.0 / self.scheduler.tick_rate_hz
        start = time.monotonic()
        pending = iter(deliveries)
        upcoming = next(pending, None)
        for t in range(ticks):
            delay = start + t * period - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            while upcoming is not None and upcoming.deliver_tick <= t:
                frame = self._stimulus(leader, upcoming, t)
                if frame is not None and frame.finger in schedulers:
                    schedulers[frame.finger].submit(frame)
                upcoming = next(pending, None)

        runs = {}
        for f, scheduler in schedulers.items():
            scheduler.join()
            events = list(scheduler.events())
            fired = np.zeros((ticks, self.electrode_geometry.size), dtype=bool)
            for event in events:
                if event.tick < ticks:
                    fired[event.tick, event.electrode_index] = True
            stats = RateStats(fired.sum(axis=0), ticks, configs[f].tick_rate_hz)
            runs[f] = SchedulerRun(events=events, stats=stats, fired=fired)
        return runs


def _udp_deliveries(encoded: List[Tuple[int, bytes]], port: int, latency_ticks: int) -> Tuple[List[Delivery], LinkStats]:
    """Send every frame over loopback UDP and stamp arrivals with the frame tick plus latency."""
    received: List[bytes] = []
    with UdpFrameChannel(port=port) as leader_channel, UdpFrameChannel() as follower_channel:
        def send_all():
            for _, data in encoded:
                follower_channel.send(data, leader_channel.address)

        sender = threading.Thread(target=send_all, name="follower-udp", daemon=True)
        sender.start()
        while len(received) < len(encoded):
            data = leader_channel.receive()
            if data is None:
                break
            received.append(data)
        sender.join()

    deliveries = []
    last = 0
    for data in received:
        try:
            last = max(last, decode(data).tick + latency_ticks)
        except FrameError:
            pass
        deliveries.append(Delivery(last, last, data))
    stats = LinkStats(sent=len(encoded), dropped=len(encoded) - len(received), delivered=len(received))
    if stats.dropped:
        logger.warning(f"UDP channel lost {stats.dropped} of {stats.sent} datagrams")
    return deliveries, stats


@dataclass
class TrialRun:
    """Leader-side output of one replayed stream."""

    ticks: int
    runs: Dict[FingerId, SchedulerRun]
    session: SessionState
    link: LinkStats
    geometry: GridGeometry = ELECTRODE_GEOMETRY

    def events(self) -> List[PulseEvent]:
        merged = [event for run in self.runs.values() for event in run.events]
        return sorted(merged, key=lambda e: (e.tick, int(e.finger), e.electrode_index))

    def stimulation_map(self, finger: FingerId = FingerId.INDEX) -> StimulationMap:
        run = self.runs[finger]
        return map_from_counts(run.stats.counts, self.ticks, self.geometry, run.stats.tick_rate_hz)

    def series(self, window_ticks: int, finger: FingerId = FingerId.INDEX) -> MapSeries:
        run = self.runs[finger]
        return MapSeries.from_fired(run.fired, window_ticks, self.geometry, run.stats.tick_rate_hz)


# --- experiments ---

@dataclass
class Stimulus:
    """One trial's input: a recorded stream and its true label."""

    label: str
    kind: str
    frames: List[WireFrame]
    ticks: Optional[int] = None
    cycle_ticks: Optional[int] = None


@dataclass
class TrialOutcome:
    index: int
    true: str
    predicted: str
    duration: float
    seed: int
    scores: Dict[str, float]
    densities: np.ndarray
    events: List[PulseEvent] = field(default_factory=list)
    peaks_per_cycle: Optional[float] = None


@dataclass
class ExperimentResult:
    kind: str
    labels: List[str]
    outcomes: List[TrialOutcome]
    matrix: ConfusionMatrix
    timing: TrialTiming

    def trials(self) -> List[Trial]:
        return [Trial(o.true, o.predicted, o.duration) for o in self.outcomes]

    @property
    def accuracy(self) -> float:
        return self.matrix.overall_accuracy

    def write(self, out_dir: Union[str, Path]) -> Dict[str, Path]:
        """
        Write pulse_log.csv, stimulation_maps.csv, trials.csv and the report files.

        Returns:
            Mapping of output name to path.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = emit_report(self.matrix, self.timing, out_dir)

        logs = []
        for outcome in self.outcomes:
            log = pulse_log_frame(outcome.events)
            log.insert(0, "trial", outcome.index)
            logs.append(log)
        pulse_log = pd.concat(logs, ignore_index=True) if logs else pd.DataFrame(columns=["trial"] + PULSE_LOG_COLUMNS)
        paths["pulse_log"] = out_dir / "pulse_log.csv"
        pulse_log.to_csv(paths["pulse_log"], index=False, lineterminator="\n")

        maps = pd.DataFrame(
            [
                {"trial": o.index, "label": o.true, "electrode": e, "density_hz": float(d)}
                for o in self.outcomes
                for e, d in enumerate(o.densities)
            ],
            columns=["trial", "label", "electrode", "density_hz"],
        )
        paths["stimulation_maps"] = out_dir / "stimulation_maps.csv"
        maps.to_csv(paths["stimulation_maps"], index=False, float_format="%.6g", lineterminator="\n")

        paths["trials"] = out_dir / "trials.csv"
        save_trials(self.trials(), paths["trials"])
        return paths


class Experiment:
    """
    Runs recognition trials through the full pipeline under one RunConfig.

    Static trials are classified against noiseless templates of the four bar
    orientations; scroll trials by their ridge-count signature.
    """

    def __init__(self, settings: Settings, run: RunConfig, model: Optional[SigmoidModel] = None,
                 udp_port: Optional[int] = None):
        self.settings = settings
        self.run = run
        self.udp_port = udp_port
        self.pipeline = TactilePipeline.from_settings(settings, model or run.model.build())
        self.sensor_geometry = settings.geometry.sensor.build()
        self._templates: Optional[Dict[str, StimulationMap]] = None

    def bar_pattern(self, label: str) -> BarPattern:
        p = self.settings.patterns
        return BarPattern(int(label.removesuffix("deg")), p.bar_thickness_sensels, p.bar_amplitude)

    def static_templates(self) -> Dict[str, StimulationMap]:
        if self._templates is None:
            self._templates = {
                label: self.pipeline.expected_static_map(generate_bar(self.bar_pattern(label), self.sensor_geometry))
                for label in STATIC_LABELS
            }
        return self._templates

    @staticmethod
    def dynamic_templates() -> Dict[str, float]:
        return {section.value: float(section.vertices) for section in CrossSection}

    def static_stimulus(self, label: str) -> Stimulus:
        grid = generate_bar(self.bar_pattern(label), self.sensor_geometry)
        ticks = min(self.settings.patterns.bar_ticks, self.run.window_ticks)
        return Stimulus(label=label, kind="bar", frames=bar_frames(grid, ticks))

    def scroll_stimulus(self, label: str) -> Stimulus:
        p = self.settings.patterns
        sequence = generate_scroll(
            PrismSpec(CrossSection(label)),
            frames_per_cycle=p.frames_per_cycle,
            cycles=p.cycles,
            amplitude=p.scroll_amplitude,
            band_thickness_sensels=p.scroll_band_thickness_sensels,
            geometry=self.sensor_geometry,
        )
        return Stimulus(
            label=label,
            kind="scroll",
            frames=scroll_frames(sequence),
            ticks=len(sequence.frames) * sequence.ticks_per_frame,
            cycle_ticks=p.frames_per_cycle * sequence.ticks_per_frame,
        )

    def run_stimulus(self, stimulus: Stimulus, index: int) -> TrialOutcome:
        """Run and classify one trial."""
        seed = derive_seed(self.run.seed or 0, _TRIAL, index)
        ticks = stimulus.ticks or self.run.window_ticks
        trial = self.pipeline.run_trial(stimulus.frames, ticks, seed, self.run.link, self.run.mode, self.udp_port)
        stimulation = trial.stimulation_map(FingerId.INDEX)
        duration = ticks / self.pipeline.scheduler.tick_rate_hz

        peaks = None
        try:
            if stimulus.kind == "scroll":
                analysis = self.settings.analysis
                result = classify_dynamic(
                    trial.series(analysis.map_window_ticks),
                    self.dynamic_templates(),
                    stimulus.cycle_ticks or self.settings.patterns.frames_per_cycle,
                    analysis.peak_threshold_factor,
                )
                predicted, scores, peaks = result.label, result.scores, result.peaks_per_cycle
            else:
                predicted, scores = classify_static(stimulation, self.static_templates())
        except UndefinedNormalization:
            logger.warning(f"Trial {index} ({stimulus.label}): no pulses reached the display")
            predicted, scores = NONE_LABEL, {}

        logger.info(f"Trial {index}: true={stimulus.label} predicted={predicted}")
        return TrialOutcome(
            index=index,
            true=stimulus.label,
            predicted=predicted,
            duration=duration,
            seed=seed,
            scores=scores,
            densities=stimulation.densities,
            events=trial.events(),
            peaks_per_cycle=peaks,
        )

    def run_corpus(self, stimuli: Sequence[Stimulus]) -> ExperimentResult:
        """
        Run every stimulus as one trial and tabulate.

        Raises:
            RecordingError: If the corpus mixes bar and scroll stimuli or is empty.
        """
        kinds = {s.kind for s in stimuli}
        if len(kinds) != 1:
            raise RecordingError(f"A corpus must hold one kind of stimulus, got {sorted(kinds) or 'none'}")
        kind = kinds.pop()
        labels = list(STATIC_LABELS if kind == "bar" else DYNAMIC_LABELS)
        outcomes = [self.run_stimulus(stimulus, n) for n, stimulus in enumerate(stimuli)]
        matrix, timing = tabulate([Trial(o.true, o.predicted, o.duration) for o in outcomes], labels)
        return ExperimentResult(kind, labels, outcomes, matrix, timing)

    def run_experiment(self, kind: str) -> ExperimentResult:
        """
        Run the static or dynamic recognition protocol.

        static: every orientation ``static_trials_per_class`` times; dynamic:
        ``dynamic_trials`` scrolls spread evenly over the four shapes. Trial
        order is shuffled with a seed derived from the run seed.
        """
        analysis = self.settings.analysis
        if kind == "static":
            labels = [label for label in STATIC_LABELS for _ in range(analysis.static_trials_per_class)]
            build = self.static_stimulus
        elif kind == "dynamic":
            labels = [DYNAMIC_LABELS[n % len(DYNAMIC_LABELS)] for n in range(analysis.dynamic_trials)]
            build = self.scroll_stimulus
        else:
            raise InvalidPattern(f"Unknown experiment kind {kind!r}")

        order = np.random.default_rng(derive_seed(self.run.seed or 0, _ORDER)).permutation(len(labels))
        cache: Dict[str, Stimulus] = {}
        stimuli = []
        for n in order:
            label = labels[n]
            if label not in cache:
                cache[label] = build(label)
            stimuli.append(cache[label])
        logger.info(f"Running {kind} experiment: {len(stimuli)} trials")
        return self.run_corpus(stimuli)


def stimuli_from_recordings(paths: Sequence[Union[str, Path]]) -> List[Stimulus]:
    """
    Load recordings written by the generate command as trial stimuli.

    Raises:
        RecordingError: If a recording lacks its pattern or label metadata.
    """
    stimuli = []
    for path in paths:
        recording = load_recording(path)
        kind = recording.metadata.get("pattern")
        label = recording.metadata.get("label")
        if kind not in ("bar", "scroll") or not label:
            raise RecordingError(f"{path}: recording needs 'pattern' and 'label' metadata")
        ticks = cycle_ticks = None
        if kind == "scroll":
            ticks = (recording.frames[-1].tick + 1) if recording.frames else 0
            cycle_ticks = int(recording.metadata.get("frames_per_cycle", 0)) or None
        stimuli.append(Stimulus(label, kind, recording.frames, ticks, cycle_ticks))
    return stimuli


def run_corpus(stimuli: Sequence[Stimulus], settings: Settings, run: RunConfig,
               udp_port: Optional[int] = None) -> ExperimentResult:
    return Experiment(settings, run, udp_port=udp_port).run_corpus(stimuli)


def run_experiment(kind: str, settings: Settings, run: RunConfig) -> ExperimentResult:
    return Experiment(settings, run).run_experiment(kind)
