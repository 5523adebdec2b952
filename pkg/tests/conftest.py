import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from _oracles import desk_dataset, train_classifier  # noqa: E402

settings.register_profile("mcgen", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mcgen")


@pytest.fixture(scope="session")
def desk8():
    """C=8 low-intra dataset (500 per mode) and a classifier trained on it."""
    ds = desk_dataset(8, 500, seed=0)
    return ds, train_classifier(ds, epochs=15, seed=0)


@pytest.fixture(scope="session")
def desk32():
    """C=32 low-intra dataset (200 per mode) and a classifier trained on it."""
    ds = desk_dataset(32, 200, seed=0)
    return ds, train_classifier(ds, epochs=15, seed=0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
