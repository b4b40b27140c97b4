import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from magloc.geometry import default_layout
from magloc.magnetics import ForwardModel

settings.register_profile(
    "magloc",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("magloc")

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def layout():
    return default_layout()


@pytest.fixture(scope="session")
def model(layout):
    return ForwardModel(layout)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion."""
    return _ACCEPTANCE


def pytest_configure(config):
    config.addinivalue_line("markers", "invariant: hypothesis property test")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        fn = getattr(item, "function", None)
        if getattr(fn, "is_hypothesis_test", False):
            item.add_marker(pytest.mark.invariant)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
