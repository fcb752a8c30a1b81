import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail/skip line per acceptance criterion."""

    def record(number: int, passed, detail: str) -> bool:
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"criterion {number:2d}: {status}  {detail}"
        _LINES[number] = line
        print(line)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_LINES):
            terminalreporter.write_line(_LINES[number])
