import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(label, ok, detail, seconds=None, limit=None):
        in_time = limit is None or seconds <= limit
        timing = "" if seconds is None else f" [{seconds:.1f}s" + (f" / limit {limit:.0f}s]" if limit else "]")
        line = f"{label}: {'PASS' if ok and in_time else 'FAIL'} {detail}{timing}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
        assert in_time, f"{label} exceeded its time budget: {seconds:.1f}s > {limit}s"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
