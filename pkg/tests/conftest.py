import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pickladder.config import EnvConfig
from pickladder.placement import PlacementSample, Regime

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# apple, orange, rubiks_cube, mug, large_marker well apart
SPREAD = [(-0.10, 0.15), (0.10, 0.15), (0.0, 0.0), (-0.10, -0.15), (0.10, -0.15)]


@pytest.fixture
def config():
    return EnvConfig()


def placement_at(positions, regime=Regime.FULL_RANDOM):
    return PlacementSample(np.array(positions, dtype=float), regime)


@pytest.fixture
def spread():
    return placement_at(SPREAD)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
