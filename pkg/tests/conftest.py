import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from po2forge.store import load_calibration, load_dataset, load_model

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=400,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def toy_model():
    return load_model(FIXTURES / "toy3")


@pytest.fixture(scope="session")
def toy_data():
    return load_dataset(FIXTURES / "toy_data")


@pytest.fixture(scope="session")
def toy_cal():
    return load_calibration(FIXTURES / "calibration.txt")


@pytest.fixture(scope="session")
def dscnn_model():
    return load_model(FIXTURES / "dscnn")


@pytest.fixture(scope="session")
def dscnn_data():
    return load_dataset(FIXTURES / "dscnn_data")
