"""Collects the acceptance verdicts and prints one line per criterion."""
import pytest

_VERDICTS = {}


@pytest.fixture(scope="session")
def verdict():
    def record(number, title, ok, detail=""):
        _VERDICTS[number] = (title, bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}: {detail}")
