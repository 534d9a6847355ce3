"""Shared test plumbing: an end-of-run summary table for the acceptance
criteria so each one reports a visible pass/fail line even when pytest
captures stdout."""

import pytest

_CRITERION_LINES = []


def _record(number: int, name: str, passed: bool, detail: str) -> None:
    _CRITERION_LINES.append((number, name, bool(passed), detail))


@pytest.fixture(scope="session")
def criterion_log():
    """Callable (number, name, passed, detail) -> None; results appear in
    the terminal summary."""
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_CRITERION_LINES):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(
            f"criterion {number} ({name}): {verdict} - {detail}")
