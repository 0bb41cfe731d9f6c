import pytest

_ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    """Store a PASS/FAIL line for the end-of-run acceptance summary."""
    def record(number, passed, detail):
        _ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
