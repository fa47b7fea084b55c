import pytest

CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one pass/fail line for the acceptance summary."""
    def record(n, ok, detail):
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
