import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_acceptance: list[tuple[str, str, float]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1].removeprefix("test_")
        _acceptance.append((name, "PASS" if report.passed else "FAIL", report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, secs in _acceptance:
        terminalreporter.write_line(f"{status} {name} ({secs:.2f}s)")
