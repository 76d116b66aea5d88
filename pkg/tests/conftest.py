import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

_criteria: list[str] = []


class CriterionLog:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title

    def check(self, ok: bool, detail: str) -> None:
        line = f"CRITERION {self.number} [{'PASS' if ok else 'FAIL'}] {self.title}: {detail}"
        _criteria.append(line)
        print(line)
        assert ok, line


@pytest.fixture
def criterion():
    return CriterionLog


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
