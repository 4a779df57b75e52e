import contextlib

import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion(request):
    """``with criterion("name") as note:`` records one PASS/FAIL line for the block.

    Failures of tests marked ``xfail`` are tagged ``XFAIL`` (known, analyzed).
    """

    @contextlib.contextmanager
    def run(name):
        details = []
        try:
            yield details.append
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            tag = "XFAIL" if request.node.get_closest_marker("xfail") else "FAIL"
            line = f"[{tag}] {name}: {msg}"
            _CRITERIA.append(line)
            print(line)
            raise
        line = f"[PASS] {name}" + (f": {'; '.join(details)}" if details else "")
        _CRITERIA.append(line)
        print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
