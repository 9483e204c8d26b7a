import pytest

_LINES = []


@pytest.fixture
def report():
    """Record one ``CRITERION n: PASS/FAIL ...`` line; echoed now and in the summary."""
    def emit(label, ok, detail):
        line = f"CRITERION {label}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
