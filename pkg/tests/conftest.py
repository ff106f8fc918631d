import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from betawave.diophantine import admissible_sampler
from betawave.model import ProblemConfig

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def cfg():
    return ProblemConfig()


@pytest.fixture(scope="session")
def omega(cfg):
    return admissible_sampler(cfg, np.random.default_rng(0), 1)[0][0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """criterion(k, ok, detail) records a pass/fail line and asserts ok."""
    def record(k: int, ok: bool, detail: str) -> None:
        line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[k] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
