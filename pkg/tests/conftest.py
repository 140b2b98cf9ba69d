from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from sindyloop.bench.systems import generate_trajectory, load_fixture

settings.register_profile(
    "repo", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")



@pytest.fixture(scope="session")
def fixture_traj():
    """Cached ground-truth trajectories of the shipped fixtures, keyed by name."""
    cache = {}

    def get(name: str):
        if name not in cache:
            cache[name] = generate_trajectory(load_fixture(name))
        return cache[name]

    return get


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture()
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
