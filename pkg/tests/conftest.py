"""Shared fixtures: the calibrated simulator configuration is expensive to
set up, so calibration and the template dataset are session-scoped."""

from __future__ import annotations

from dataclasses import replace

import pytest

from emscope.features import default_band_spec
from emscope.pipeline import template_dataset
from emscope.simulate import SimConfig, calibrate_noise, oracle_accuracy

CALIBRATION_SEED = 3
DATASET_SEED = 11


@pytest.fixture(scope="session")
def base_cfg() -> SimConfig:
    return SimConfig()


@pytest.fixture(scope="session")
def calibrated_sigma(base_cfg) -> float:
    return calibrate_noise(base_cfg, 0.89, trials=1000, seed=CALIBRATION_SEED)


@pytest.fixture(scope="session")
def cal_cfg(base_cfg, calibrated_sigma) -> SimConfig:
    return replace(base_cfg, noise_sigma_volts=calibrated_sigma)


@pytest.fixture(scope="session")
def bayes_accuracy(cal_cfg, calibrated_sigma) -> float:
    return oracle_accuracy(cal_cfg, calibrated_sigma, trials=2000, seed=9)


@pytest.fixture(scope="session")
def calibrated_template_ds(cal_cfg):
    return template_dataset(cal_cfg, 100, default_band_spec(), seed=DATASET_SEED)
