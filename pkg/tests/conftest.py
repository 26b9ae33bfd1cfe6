from __future__ import annotations

import pytest

# one line per acceptance criterion, printed after the run
_CRITERIA: list[str] = []


class CriterionLog:
    def record(self, name: str, passed: bool, detail: str) -> None:
        _CRITERIA.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def criteria() -> CriterionLog:
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in _CRITERIA:
        terminalreporter.write_line(line)
