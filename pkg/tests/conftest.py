import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tirecover.material import MaterialField
from tirecover.scenarios import M0

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def m0():
    return MaterialField.constant(M0)


@pytest.fixture
def tilted():
    return MaterialField.constant(M0, axis=(0.3, 0.1, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
