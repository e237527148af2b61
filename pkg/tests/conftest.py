import contextlib

import pytest

_LINES: list[str] = []


class _Check:
    def __init__(self, label):
        self.label = label
        self.detail = ""


@contextlib.contextmanager
def _criterion(label: str):
    c = _Check(label)
    try:
        yield c
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        line = f"FAIL  {label}: {c.detail} [{msg}]" if c.detail else f"FAIL  {label}: {msg}"
        _LINES.append(line)
        print(line)
        raise
    line = f"PASS  {label}: {c.detail}"
    _LINES.append(line)
    print(line)


@pytest.fixture
def criterion():
    """``with criterion("1 FLOP table") as c: ...`` records one PASS/FAIL line."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
