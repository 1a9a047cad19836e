import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture(scope="session")
def criterion_log(pytestconfig):
    """``log(n, ok, detail)`` records one acceptance line for the summary."""
    lines = pytestconfig.stash[_CRITERIA]

    def log(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)

    return log


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
