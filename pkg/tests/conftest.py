import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def verdict(request):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion, then return whether it passed."""

    def record(number, title, ok, measured, tolerance):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {measured}  [tolerance: {tolerance}]"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
