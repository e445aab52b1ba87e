#!/usr/bin/env python3
"""
Tactile Transfer CLI

Entry point for the tactile transfer simulator: stimulus generation,
calibration fitting, follower-to-leader pipeline runs, experiments, replay
and report analysis.

Exit status: 0 on success, 1 on a simulator error, 2 on a usage error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import find_dotenv, load_dotenv

from core_modules.analysis import emit_report, load_trials, tabulate
from core_modules.config_loader import ConfigLoader, RunConfig, Settings, dump_settings, load_settings
from core_modules.errors import ElectroARError
from core_modules.grid import FingerId
from core_modules.patterns import (
    BAR_ORIENTATIONS,
    BarPattern,
    CrossSection,
    PrismSpec,
    bar_frames,
    generate_bar,
    generate_calibration_session,
    generate_scroll,
    record,
    replay,
    scroll_frames,
)
from core_modules.pipeline import Experiment, ExperimentResult, stimuli_from_recordings
from core_modules.psychophysics import SigmoidModel, fit, load_model, load_samples, save_model, save_samples, write_fit_trace

logger = logging.getLogger("core.cli")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class UsageError(Exception):
    """Raised for flag combinations argparse cannot check on its own."""
    pass


# --- parser ---

def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, help="Run seed (required in simulated-time mode)")
    parser.add_argument("--mode", choices=["simulated-time", "wall-clock"], help="Time base")
    parser.add_argument("--loss", type=float, help="Link loss probability")
    parser.add_argument("--latency-ticks", type=int, help="Fixed link delay in ticks")
    parser.add_argument("--jitter-ticks", type=int, help="Maximum symmetric jitter in ticks")
    parser.add_argument("--reorder", type=float, help="Explicit reorder probability")
    parser.add_argument("--model", help="Fitted model file (a,b,k,residual)")
    parser.add_argument("--window-ticks", type=int, help="Observation window for static trials")
    parser.add_argument("--out-dir", help="Output directory (default: $ELECTROAR_OUT)")
    parser.add_argument("--plots", action="store_true", help="Also write PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tactile_cli", description="Electro-tactile transfer simulator")
    parser.add_argument("--config", help="YAML file layered over configs/global_settings.yaml")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Write stimulus recordings or calibration sessions")
    kinds = generate.add_subparsers(dest="kind", required=True)

    bar = kinds.add_parser("bar", help="Static bar pattern held for a number of ticks")
    bar.add_argument("--deg", required=True, choices=[str(d) for d in BAR_ORIENTATIONS] + ["all"])
    bar.add_argument("--ticks", type=int, help="Frames to record, one per tick")
    bar.add_argument("--amplitude", type=int, help="Pressure count inside the bar")
    bar.add_argument("--thickness", type=float, help="Bar thickness in sensels")

    scroll = kinds.add_parser("scroll", help="Back-and-forth prism scroll")
    scroll.add_argument("--shape", required=True, choices=[c.value for c in CrossSection] + ["all"])
    scroll.add_argument("--frames-per-cycle", type=int)
    scroll.add_argument("--cycles", type=int)
    scroll.add_argument("--amplitude", type=int)

    for sub in (bar, scroll):
        sub.add_argument("--seed", type=int, help="Run seed recorded in the recording header")
        target = sub.add_mutually_exclusive_group(required=True)
        target.add_argument("--out", help="Recording file to write")
        target.add_argument("--corpus", help="Directory receiving one recording per class")

    calibration = kinds.add_parser("calibration", help="Simulated magnitude-estimation session CSV")
    calibration.add_argument("--out", required=True)
    calibration.add_argument("--seed", type=int, default=0)
    calibration.add_argument("--model", help="Ground-truth model file instead of the configured coefficients")
    calibration.add_argument("--noise-sigma", type=float)
    calibration.add_argument("--participants", type=int)

    fit_cmd = commands.add_parser("fit", help="Fit the transfer function to a calibration CSV")
    fit_cmd.add_argument("samples", help="CSV with header probability,reported")
    fit_cmd.add_argument("--out", required=True, help="Model file to write")
    fit_cmd.add_argument("--trace", help="Also write the k scan as CSV")
    fit_cmd.add_argument("--plots", action="store_true")

    pipeline = commands.add_parser("pipeline", help="Run recordings through the full pipeline")
    source = pipeline.add_mutually_exclusive_group(required=True)
    source.add_argument("--recording", nargs="+", help="Recording files, one trial each")
    source.add_argument("--corpus", help="Directory of .earlog recordings")
    pipeline.add_argument("--udp-port", type=int, help="Carry frames over loopback UDP on this port")
    _add_run_flags(pipeline)

    experiment = commands.add_parser("experiment", help="Run the static or dynamic recognition protocol")
    experiment.add_argument("kind", choices=["static", "dynamic"])
    _add_run_flags(experiment)

    replay_cmd = commands.add_parser("replay", help="Validate a recording and summarise it")
    replay_cmd.add_argument("recording")
    replay_cmd.add_argument("--mode", choices=["simulated-time", "wall-clock"], default="simulated-time")

    analyze = commands.add_parser("analyze", help="Tabulate a trial log CSV (true,predicted,duration)")
    analyze.add_argument("trials")
    analyze.add_argument("--out-dir")
    analyze.add_argument("--plots", action="store_true")

    config = commands.add_parser("config", help="Show the effective settings")
    config.add_argument("--dump", action="store_true", help="Print merged settings as YAML")
    config.add_argument("--save", metavar="PATH", help="Write merged settings to a YAML file")
    return parser


# --- helpers ---

def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Settings overrides from run flags; unset flags leave lower layers alone."""
    link = {
        "loss_probability": getattr(args, "loss", None),
        "latency_ticks": getattr(args, "latency_ticks", None),
        "jitter_ticks": getattr(args, "jitter_ticks", None),
        "reorder_probability": getattr(args, "reorder", None),
    }
    run = {
        "mode": getattr(args, "mode", None) if args.command != "replay" else None,
        "seed": getattr(args, "seed", None) if args.command in ("pipeline", "experiment") else None,
        "window_ticks": getattr(args, "window_ticks", None),
    }
    overrides: Dict[str, Any] = {}
    if any(v is not None for v in link.values()):
        overrides["link"] = {k: v for k, v in link.items() if v is not None}
    if any(v is not None for v in run.values()):
        overrides["run"] = {k: v for k, v in run.items() if v is not None}
    if getattr(args, "model", None) and args.command in ("pipeline", "experiment"):
        overrides["model"] = {"path": args.model}
    if getattr(args, "out_dir", None):
        overrides["paths"] = {"out_dir": args.out_dir}
    return overrides


def _out_dir(settings: Settings) -> Path:
    if not settings.paths.out_dir:
        raise UsageError("no output directory: pass --out-dir or set ELECTROAR_OUT")
    return Path(settings.paths.out_dir)


def _run_config(settings: Settings) -> RunConfig:
    if settings.run.mode == "simulated-time" and settings.run.seed is None:
        raise UsageError("--seed is required in simulated-time mode")
    return RunConfig.from_settings(settings)


def _write_result(result: ExperimentResult, out_dir: Path, plots: bool) -> None:
    paths = result.write(out_dir)
    if plots:
        from core_modules.plotting import plot_confusion, plot_timing

        plot_confusion(result.matrix, out_dir / "confusion.png")
        plot_timing(result.timing, out_dir / "timing.png")
    print(f"{result.kind}: {len(result.outcomes)} trials, accuracy {result.accuracy:.1%}")
    for label in result.labels:
        print(f"  {label:>10}: {result.matrix.accuracy(label):.1%}")
    print(f"Report written to {paths['accuracy'].parent}")


# --- commands ---

def cmd_generate(args: argparse.Namespace, settings: Settings) -> int:
    if args.kind == "calibration":
        return _generate_calibration(args, settings)

    geometry = settings.geometry.sensor.build()
    p = settings.patterns
    if args.kind == "bar":
        labels = [int(d) for d in BAR_ORIENTATIONS] if args.deg == "all" else [int(args.deg)]
    else:
        labels = [c.value for c in CrossSection] if args.shape == "all" else [args.shape]
    if len(labels) > 1 and args.out:
        raise UsageError("--out takes a single class; use --corpus for 'all'")

    for label in labels:
        if args.kind == "bar":
            pattern = BarPattern(
                label,
                args.thickness if args.thickness is not None else p.bar_thickness_sensels,
                args.amplitude if args.amplitude is not None else p.bar_amplitude,
            )
            ticks = args.ticks or p.bar_ticks
            frames = bar_frames(generate_bar(pattern, geometry), ticks, FingerId.INDEX)
            metadata = {
                "pattern": "bar",
                "label": pattern.label,
                "orientation_deg": str(pattern.orientation_deg),
                "thickness_sensels": f"{pattern.thickness_sensels:g}",
                "amplitude": str(pattern.amplitude),
            }
            name = pattern.label
        else:
            fpc = args.frames_per_cycle or p.frames_per_cycle
            cycles = args.cycles or p.cycles
            amplitude = args.amplitude if args.amplitude is not None else p.scroll_amplitude
            sequence = generate_scroll(PrismSpec(CrossSection(label)), fpc, cycles, amplitude,
                                       p.scroll_band_thickness_sensels, geometry)
            frames = scroll_frames(sequence)
            metadata = {
                "pattern": "scroll",
                "label": label,
                "frames_per_cycle": str(fpc),
                "cycles": str(cycles),
                "amplitude": str(amplitude),
            }
            name = label

        if args.seed is not None:
            metadata["seed"] = str(args.seed)

        path = Path(args.out) if args.out else Path(args.corpus) / f"{args.kind}_{name}.earlog"
        count = record(frames, path, geometry, settings.scheduler.tick_rate_hz, metadata)
        print(f"{path}: {count} frames")
    return 0


def _generate_calibration(args: argparse.Namespace, settings: Settings) -> int:
    c = settings.calibration
    model = load_model(args.model) if args.model else settings.model.build()
    samples = generate_calibration_session(
        model,
        levels=c.levels,
        trials_per_level=c.trials_per_level,
        participants=args.participants or c.participants,
        noise_sigma=args.noise_sigma if args.noise_sigma is not None else c.noise_sigma,
        seed=args.seed,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_samples(samples, args.out)
    print(f"{args.out}: {len(samples)} trials")
    return 0


def cmd_fit(args: argparse.Namespace, settings: Settings) -> int:
    samples = load_samples(args.samples)
    model, report = fit(samples)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, report.residual_sum, args.out)
    if args.trace:
        write_fit_trace(report, args.trace)
    if args.plots:
        from core_modules.plotting import plot_calibration

        plot_calibration(samples, model, Path(args.out).with_suffix(".png"))

    print(f"a={model.a:.6g} b={model.b:.6g} k={model.k:.6g} residual={report.residual_sum:.6g}")
    print(f"{report.n_samples} trials over {len(report.level_means)} levels")
    for level, mean in report.level_means.items():
        print(f"  p={level:g}: mean S={mean:.6g}")
    return 0


def cmd_pipeline(args: argparse.Namespace, settings: Settings) -> int:
    run = _run_config(settings)
    out_dir = _out_dir(settings)
    if args.corpus:
        paths: List[Path] = sorted(Path(args.corpus).glob("*.earlog"))
        if not paths:
            raise UsageError(f"no .earlog recordings in {args.corpus}")
    else:
        paths = [Path(p) for p in args.recording]

    stimuli = stimuli_from_recordings(paths)
    result = Experiment(settings, run, udp_port=args.udp_port).run_corpus(stimuli)
    _write_result(result, out_dir, args.plots)
    return 0


def cmd_experiment(args: argparse.Namespace, settings: Settings) -> int:
    run = _run_config(settings)
    out_dir = _out_dir(settings)
    result = Experiment(settings, run).run_experiment(args.kind)
    _write_result(result, out_dir, args.plots)
    return 0


def cmd_replay(args: argparse.Namespace, settings: Settings) -> int:
    header, frames = replay(args.recording, wall_clock=args.mode == "wall-clock")
    count = 0
    first = last = None
    fingers = set()
    for frame in frames:
        count += 1
        first = frame.tick if first is None else first
        last = frame.tick
        fingers.add(frame.finger.name.lower())
    print(f"{args.recording}: {count} frames")
    print(f"geometry {header.geometry}, tick_rate {header.tick_rate:g}")
    if count:
        print(f"ticks {first}..{last}, fingers {','.join(sorted(fingers))}")
    for key, value in header.metadata.items():
        print(f"meta {key} {value}")
    return 0


def cmd_analyze(args: argparse.Namespace, settings: Settings) -> int:
    out_dir = _out_dir(settings)
    matrix, timing = tabulate(load_trials(args.trials))
    emit_report(matrix, timing, out_dir)
    if args.plots:
        from core_modules.plotting import plot_confusion, plot_timing

        plot_confusion(matrix, out_dir / "confusion.png")
        plot_timing(timing, out_dir / "timing.png")
    print(f"{int(matrix.counts.sum())} trials, accuracy {matrix.overall_accuracy:.1%}")
    return 0


def cmd_config(args: argparse.Namespace, settings: Settings) -> int:
    if args.dump:
        print(dump_settings(settings), end="")
    if args.save:
        ConfigLoader().save_config(settings.model_dump(mode="json"), args.save)
        print(f"Settings written to {args.save}")
    if not (args.dump or args.save):
        print(f"settings version {settings.version}; use --dump to print them")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "pipeline": cmd_pipeline,
    "experiment": cmd_experiment,
    "replay": cmd_replay,
    "analyze": cmd_analyze,
    "config": cmd_config,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, load settings and dispatch; returns the exit status."""
    load_dotenv(find_dotenv(usecwd=True))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        settings = load_settings(args.config, _overrides(args))
    except ElectroARError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1

    logging.basicConfig(
        level=getattr(logging, args.log_level or settings.logging.level.upper(), logging.INFO),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )

    try:
        return COMMANDS[args.command](args, settings)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2
    except ElectroARError as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
