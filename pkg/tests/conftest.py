import pytest

_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """Record ``(number, ok, detail)`` for the end-of-run criterion summary."""

    def record(number, name, ok, detail):
        prev = _CRITERIA.get(number)
        ok = ok and (prev is None or prev[1])
        details = detail if prev is None else prev[2] + "; " + detail
        _CRITERIA[number] = (name, ok, details)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})")
