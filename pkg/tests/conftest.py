
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# fixed-seed property runs, 100 passing cases each; heavy assume() filtering is fine
settings.register_profile(
    "repo",
    max_examples=100,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large, HealthCheck.filter_too_much],
)
settings.load_profile("repo")

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion_report():
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def report(number: int, ok: bool, text: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {text}"
        _CRITERIA[number] = line
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
