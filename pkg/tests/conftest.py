import contextlib

import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """Context manager that records PASS/FAIL for one acceptance criterion."""

    @contextlib.contextmanager
    def record(number, title):
        details = {}
        try:
            yield details
        except BaseException:
            _RESULTS[number] = (title, False, details)
            raise
        _RESULTS[number] = (title, True, details)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, details = _RESULTS[number]
        extra = "; ".join(f"{k}={v}" for k, v in details.items())
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(f"{line} ({extra})" if extra else line)
