import pytest

_REPORT: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def criterion_report():
    """Record one line per acceptance criterion; printed in the terminal summary."""

    def record(name: str, passed: bool, detail: str) -> bool:
        _REPORT.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _REPORT:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
