"""Tests for the command-line entry point."""

import pytest
import yaml

from core_modules.patterns import load_recording
from tactile_cli import main


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    monkeypatch.delenv("ELECTROAR_OUT", raising=False)
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def bar_corpus(tmp_path):
    corpus = tmp_path / "bars"
    assert main(["generate", "bar", "--deg", "all", "--ticks", "240", "--corpus", str(corpus)]) == 0
    return corpus


def test_generate_bar(tmp_path, capsys):
    out = tmp_path / "bar45.earlog"
    assert main(["generate", "bar", "--deg", "45", "--ticks", "12", "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip() == f"{out}: 12 frames"
    recording = load_recording(out)
    assert len(recording.frames) == 12
    assert recording.metadata["pattern"] == "bar"
    assert recording.metadata["label"] == "45deg"


def test_generate_scroll(tmp_path):
    out = tmp_path / "square.earlog"
    assert main(["generate", "scroll", "--shape", "square", "--cycles", "10", "--frames-per-cycle", "8",
                 "--out", str(out)]) == 0
    recording = load_recording(out)
    # one frame per finger per tick
    assert len(recording.frames) == 160
    assert recording.metadata["frames_per_cycle"] == "8"


def test_generate_records_the_seed(tmp_path):
    seeded, unseeded = tmp_path / "seeded.earlog", tmp_path / "unseeded.earlog"
    assert main(["generate", "scroll", "--shape", "circle", "--cycles", "2", "--seed", "11", "--out", str(seeded)]) == 0
    assert main(["generate", "bar", "--deg", "90", "--ticks", "4", "--out", str(unseeded)]) == 0
    assert load_recording(seeded).metadata["seed"] == "11"
    assert "seed" not in load_recording(unseeded).metadata


def test_generate_corpus_names(bar_corpus):
    assert sorted(p.name for p in bar_corpus.iterdir()) == [
        "bar_0deg.earlog", "bar_135deg.earlog", "bar_45deg.earlog", "bar_90deg.earlog",
    ]


def test_usage_errors(tmp_path, capsys):
    assert main(["generate", "scroll", "--shape", "pentagon", "--out", str(tmp_path / "x")]) == 2
    assert main(["generate", "bar", "--deg", "all", "--out", str(tmp_path / "x")]) == 2
    assert main(["frobnicate"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_calibration_and_fit(tmp_path, capsys):
    samples = tmp_path / "cal.csv"
    assert main(["generate", "calibration", "--out", str(samples), "--seed", "3"]) == 0
    assert samples.read_text().splitlines()[0] == "probability,reported"

    assert main(["fit", str(samples), "--out", str(tmp_path / "m1.csv"), "--trace", str(tmp_path / "trace.csv")]) == 0
    assert main(["fit", str(samples), "--out", str(tmp_path / "m2.csv")]) == 0
    assert (tmp_path / "m1.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()
    out = capsys.readouterr().out
    coefficients = dict(item.split("=") for item in out.splitlines()[1].split())
    assert float(coefficients["a"]) == pytest.approx(3.0, rel=1e-5)
    assert float(coefficients["b"]) == pytest.approx(6.0, rel=1e-5)
    assert float(coefficients["k"]) == pytest.approx(150.0, rel=1e-5)
    assert "30 trials over 6 levels" in out


def test_fit_on_empty_file(tmp_path, capsys):
    (tmp_path / "empty.csv").write_text("probability,reported\n")
    assert main(["fit", str(tmp_path / "empty.csv"), "--out", str(tmp_path / "m.csv")]) == 1
    assert "InsufficientData" in capsys.readouterr().err


def test_pipeline_on_a_corpus(bar_corpus, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["pipeline", "--corpus", str(bar_corpus), "--seed", "1", "--window-ticks", "240",
                 "--out-dir", str(out)]) == 0
    assert "bar: 4 trials, accuracy 100.0%" in capsys.readouterr().out
    for name in ("confusion.csv", "accuracy.csv", "timing.csv", "pulse_log.csv", "stimulation_maps.csv"):
        assert (out / name).is_file()


def test_pipeline_is_reproducible(bar_corpus, tmp_path):
    for name in ("first", "second"):
        assert main(["pipeline", "--corpus", str(bar_corpus), "--seed", "11", "--window-ticks", "120",
                     "--loss", "0.1", "--jitter-ticks", "1", "--out-dir", str(tmp_path / name)]) == 0
    for report in ("pulse_log.csv", "accuracy.csv", "confusion.csv"):
        assert (tmp_path / "first" / report).read_bytes() == (tmp_path / "second" / report).read_bytes()


def test_pipeline_under_heavy_loss(bar_corpus, tmp_path, capsys):
    capsys.readouterr()
    assert main(["pipeline", "--corpus", str(bar_corpus), "--seed", "1", "--loss", "0.99", "--window-ticks", "5",
                 "--out-dir", str(tmp_path / "lossy")]) == 0
    summary = capsys.readouterr().out.splitlines()[0]
    accuracy = float(summary.rsplit(" ", 1)[1].rstrip("%"))
    assert accuracy <= 50.0


def test_pipeline_needs_a_seed(bar_corpus, tmp_path, capsys):
    assert main(["pipeline", "--corpus", str(bar_corpus), "--out-dir", str(tmp_path / "run")]) == 2
    assert "--seed is required" in capsys.readouterr().err


def test_pipeline_needs_an_output_directory(bar_corpus):
    assert main(["pipeline", "--corpus", str(bar_corpus), "--seed", "1"]) == 2


def test_output_directory_from_environment(bar_corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("ELECTROAR_OUT", str(tmp_path / "env_out"))
    assert main(["pipeline", "--recording", str(bar_corpus / "bar_0deg.earlog"), "--seed", "2",
                 "--window-ticks", "120"]) == 0
    assert (tmp_path / "env_out" / "accuracy.csv").is_file()


def test_pipeline_rejects_a_corrupt_recording(tmp_path, capsys):
    bad = tmp_path / "bad.earlog"
    bad.write_bytes(b"earlog 9\n\n")
    assert main(["pipeline", "--recording", str(bad), "--seed", "1", "--out-dir", str(tmp_path / "o")]) == 1
    assert "VersionMismatch" in capsys.readouterr().err


def test_replay(bar_corpus, capsys):
    capsys.readouterr()
    assert main(["replay", str(bar_corpus / "bar_90deg.earlog")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].endswith(": 240 frames")
    assert lines[1] == "geometry 5x10, tick_rate 120"
    assert lines[2] == "ticks 0..239, fingers index"
    assert "meta label 90deg" in lines


def test_analyze(tmp_path, capsys):
    log = tmp_path / "trials.csv"
    log.write_text("true,predicted,duration\nA,A,1.5\nA,B,2\nB,B,3\n")
    assert main(["analyze", str(log), "--out-dir", str(tmp_path / "report")]) == 0
    assert "3 trials, accuracy 66.7%" in capsys.readouterr().out
    assert (tmp_path / "report" / "confusion.csv").read_text() == "label,A,B\nA,1,1\nB,0,1\n"


def test_config_dump(tmp_path, capsys):
    user = tmp_path / "user.yaml"
    user.write_text("run:\n  seed: 77\n")
    assert main(["--config", str(user), "config", "--dump"]) == 0
    dumped = yaml.safe_load(capsys.readouterr().out)
    assert dumped["run"]["seed"] == 77
    assert dumped["scheduler"]["tick_rate_hz"] == 120.0


def test_config_save(tmp_path, capsys):
    user = tmp_path / "user.yaml"
    user.write_text("link:\n  loss_probability: 0.25\n")
    saved = tmp_path / "out" / "effective.yaml"
    assert main(["--config", str(user), "config", "--save", str(saved)]) == 0
    assert f"Settings written to {saved}" in capsys.readouterr().out
    reloaded = yaml.safe_load(saved.read_text())
    assert reloaded["link"]["loss_probability"] == 0.25

    # the saved file layers back to the same settings
    assert main(["--config", str(saved), "config", "--dump"]) == 0
    assert yaml.safe_load(capsys.readouterr().out) == reloaded


def test_bad_config_file(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "missing.yaml"), "config"]) == 1
    assert "ConfigError" in capsys.readouterr().err


def test_plots_are_written(tmp_path):
    log = tmp_path / "trials.csv"
    log.write_text("true,predicted,duration\nA,A,1.5\nB,A,2\nB,B,3\n")
    assert main(["analyze", str(log), "--out-dir", str(tmp_path / "report"), "--plots"]) == 0
    assert (tmp_path / "report" / "confusion.png").stat().st_size > 0
    assert (tmp_path / "report" / "timing.png").stat().st_size > 0

    samples = tmp_path / "cal.csv"
    assert main(["generate", "calibration", "--out", str(samples)]) == 0
    assert main(["fit", str(samples), "--out", str(tmp_path / "model.csv"), "--plots"]) == 0
    assert (tmp_path / "model.png").is_file()
