"""Shared pytest wiring: acceptance criteria print one summary line each."""

from __future__ import annotations

import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Recorder for one pass/fail line per acceptance criterion."""

    def record(line: str) -> None:
        _LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
