"""Shared pytest fixtures."""

import pytest

from core_modules.config_loader import RunConfig, Settings, load_settings
from core_modules.pipeline import Experiment, TactilePipeline
from core_modules.psychophysics import SigmoidModel


@pytest.fixture
def model() -> SigmoidModel:
    return SigmoidModel(a=3.0, b=6.0, k=150.0)


@pytest.fixture
def settings(monkeypatch) -> Settings:
    monkeypatch.delenv("ELECTROAR_OUT", raising=False)
    return load_settings()


@pytest.fixture
def pipeline(settings) -> TactilePipeline:
    return TactilePipeline.from_settings(settings)


@pytest.fixture
def make_experiment(settings):
    """Build an Experiment from the default settings plus run overrides."""

    def build(seed: int = 1, settings_override: Settings = None, **run_values) -> Experiment:
        active = settings_override or settings
        run = RunConfig.from_settings(active, seed=seed, **run_values)
        return Experiment(active, run)

    return build
