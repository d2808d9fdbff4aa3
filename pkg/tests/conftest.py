import pytest

_LINES = []


@pytest.fixture
def record():
    """Log one acceptance line (``PASS``, ``FAIL`` or ``N/A`` when ``ok`` is None) and return ``ok``."""
    def _record(name, ok, detail=""):
        status = "N/A " if ok is None else ("PASS" if ok else "FAIL")
        _LINES.append(f"{status}  {name}  {detail}".rstrip())
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
