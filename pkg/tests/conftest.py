import pytest

N_CRITERIA = 9
_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one acceptance criterion's outcome; returns ``ok``."""
    def record(number: int, ok: bool, detail: str = "") -> bool:
        _VERDICTS[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in _VERDICTS:
            ok, detail = _VERDICTS[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
