import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for the terminal summary, then assert it."""
    def _v(n: int, ok: bool, detail: str):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS.append(line)
        print(line)
        assert ok, line
    return _v


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)
