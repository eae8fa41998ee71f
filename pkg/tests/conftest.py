"""Shared pytest plumbing: the acceptance-criteria summary table.

Criterion tests register a verdict before asserting, so the terminal summary
always shows one line per criterion, pass or fail.
"""

import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}

NUM_CRITERIA = 7


@pytest.fixture
def criterion():
    def _record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (passed, detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, NUM_CRITERIA + 1):
        passed, detail = ACCEPTANCE.get(number, (False, "did not run"))
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status} - {detail}")
