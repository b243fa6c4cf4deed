import pytest

_criteria: list[tuple[str, bool, str]] = []


@pytest.fixture
def report_criterion():
    """Record one acceptance criterion outcome; printed in the terminal summary."""

    def record(name: str, passed: bool, detail: str = "") -> bool:
        _criteria.append((name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _criteria:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
