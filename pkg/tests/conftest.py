import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; ``soft`` lines never fail the test."""

    def _report(number, name, ok, detail="", soft=False):
        status = "PASS" if ok else ("WARN" if soft else "FAIL")
        line = f"[criterion {number:>2}] {status}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if not soft:
            assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
