"""Tests for configuration loading, merging and run settings."""

from pathlib import Path

import pytest
import yaml

from core_modules.config_loader import ConfigLoader, ModelSettings, RunConfig, Settings, dump_settings, load_settings
from core_modules.errors import ConfigError
from core_modules.psychophysics import SigmoidModel, save_model


def write_yaml(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def test_defaults(settings):
    assert settings.run.seed is None
    assert settings.run.mode == "simulated-time"
    assert settings.scheduler.tick_rate_hz == 120.0
    assert settings.scheduler.pulse_width_us == 100
    assert settings.link.latency_ticks == 1
    assert (settings.model.a, settings.model.b, settings.model.k) == (3.0, 6.0, 150.0)
    assert settings.geometry.row_map == [0, 2, 4, 6, 8]
    assert settings.paths.out_dir is None
    assert Path(settings.paths.recordings_dir).is_absolute()


def test_out_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("ELECTROAR_OUT", str(tmp_path / "runs"))
    assert load_settings().paths.out_dir == str(tmp_path / "runs")


def test_relative_out_dir_from_environment_follows_the_working_directory(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("ELECTROAR_OUT", "runs")
    assert load_settings().paths.out_dir == str(tmp_path / "runs")

    # entries written in the file still resolve against the root
    assert load_settings().paths.recordings_dir.startswith(str(ConfigLoader().root))


def test_user_file_overrides_defaults(settings, tmp_path):
    user = write_yaml(tmp_path / "user.yaml", "run:\n  seed: 5\nlink:\n  loss_probability: 0.2\n")
    layered = load_settings(user)
    assert layered.run.seed == 5
    assert layered.link.loss_probability == 0.2
    assert layered.link.latency_ticks == settings.link.latency_ticks


def test_overrides_take_precedence(tmp_path):
    user = write_yaml(tmp_path / "user.yaml", "run:\n  window_ticks: 50\n")
    assert load_settings(user, overrides={"run": {"window_ticks": 10}}).run.window_ticks == 10


@pytest.mark.parametrize("text", [
    "link:\n  loss_probability: 1.5\n",
    "run:\n  mode: sometimes\n",
    "geometry:\n  sensor: {width: 300, height: 10}\n",
    "run: [\n",
    "- just\n- a list\n",
])
def test_invalid_files_raise_config_error(tmp_path, text):
    with pytest.raises(ConfigError):
        load_settings(write_yaml(tmp_path / "bad.yaml", text))


def test_missing_user_file(tmp_path):
    with pytest.raises(ConfigError):
        load_settings(tmp_path / "absent.yaml")


def test_loader_with_custom_root(tmp_path, monkeypatch):
    monkeypatch.delenv("ELECTROAR_OUT", raising=False)
    (tmp_path / "configs").mkdir()
    write_yaml(tmp_path / "configs" / "global_settings.yaml",
               "paths:\n  out_dir: out\n  recordings_dir: ${ELECTROAR_OUT}\n")
    loader = ConfigLoader(tmp_path)
    config = loader.load_global_config()
    assert config["paths"]["out_dir"] == str(tmp_path.resolve() / "out")
    assert config["paths"]["recordings_dir"] is None
    assert loader.load_global_config() is config


def test_missing_global_file_gives_defaults(tmp_path):
    assert load_settings(loader=ConfigLoader(tmp_path)) == Settings()


def test_merge_configs_is_recursive():
    loader = ConfigLoader()
    base = {"link": {"latency_ticks": 1, "jitter_ticks": 0}, "version": "1"}
    merged = loader.merge_configs(base, {"link": {"jitter_ticks": 2}, "extra": True})
    assert merged == {"link": {"latency_ticks": 1, "jitter_ticks": 2}, "version": "1", "extra": True}
    assert base["link"]["jitter_ticks"] == 0


def test_save_config_round_trip(tmp_path):
    loader = ConfigLoader()
    data = {"run": {"seed": 9, "mode": "wall-clock"}, "analysis": {"map_window_ticks": 12}}
    loader.save_config(data, tmp_path / "nested" / "saved.yaml")
    assert loader.load_user_config(tmp_path / "nested" / "saved.yaml") == data


def test_dump_settings_reloads(settings):
    text = dump_settings(settings)
    assert Settings.model_validate(yaml.safe_load(text)) == settings
    assert text.startswith("version:")


def test_run_config_seed_rules(settings):
    with pytest.raises(ConfigError):
        RunConfig.from_settings(settings)
    assert RunConfig.from_settings(settings, mode="wall-clock").seed is None
    run = RunConfig.from_settings(settings, seed=42, window_ticks=600)
    assert (run.seed, run.window_ticks, run.mode) == (42, 600, "simulated-time")
    assert run.link == settings.link
    with pytest.raises(ConfigError):
        RunConfig.from_settings(settings, seed=-1)


def test_model_settings_prefer_a_fitted_file(tmp_path):
    save_model(SigmoidModel(a=2.0, b=5.0, k=120.0), 0.5, tmp_path / "model.csv")
    built = ModelSettings(path=str(tmp_path / "model.csv")).build()
    assert (built.a, built.b, built.k) == (2.0, 5.0, 120.0)
    assert ModelSettings().build() == SigmoidModel(a=3.0, b=6.0, k=150.0)
