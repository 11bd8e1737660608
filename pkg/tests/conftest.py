from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from tdmvolt.presets import dynamic_config, static_config

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "paper-configs"


@pytest.fixture
def static_cfg():
    return static_config()


@pytest.fixture
def dynamic_cfg():
    return dynamic_config()


@pytest.fixture
def configs_dir():
    return CONFIGS
