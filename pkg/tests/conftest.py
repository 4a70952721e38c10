import time

import pytest

SUITE_BUDGET_S = 15 * 60
_START = time.perf_counter()
_LINES: list[str] = []


def elapsed() -> float:
    return time.perf_counter() - _START


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion and return the verdict."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_collection_modifyitems(items):
    # the wall-time check must see every other test
    last = [it for it in items if it.name == "test_criterion_10_suite_wall_time"]
    items[:] = [it for it in items if it not in last] + last


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
    terminalreporter.write_line(f"suite wall time: {elapsed():.1f} s")
