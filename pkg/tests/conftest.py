import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from driftlab import harness

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def demo_config():
    return harness.load_config("demo")


@pytest.fixture(scope="session")
def demo_model(demo_config):
    """Shipped checkpoint: ``(net, prior)``."""
    return harness.load_model(demo_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
