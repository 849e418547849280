import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    def record(criterion, ok, detail):
        _CRITERIA.append((str(criterion), ok, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {name}: {detail}")
