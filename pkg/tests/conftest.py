import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_VERDICTS: dict[int, tuple[str, str]] = {}


@pytest.fixture
def verdict():
    """Record one line per acceptance criterion for the end-of-run summary."""
    def record(criterion: int, status, detail: str = "") -> None:
        if isinstance(status, bool):
            status = "PASS" if status else "FAIL"
        _VERDICTS[criterion] = (status, detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(_VERDICTS):
        status, detail = _VERDICTS[c]
        terminalreporter.write_line(f"criterion {c:2d}: {status}  {detail}")
