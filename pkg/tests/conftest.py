import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "crwkv",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.differing_executors],
)
settings.load_profile("crwkv")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one acceptance line; returns ``ok`` so tests can assert on it."""
    def _report(number: int, title: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]"
        print(_ACCEPTANCE[number])
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
