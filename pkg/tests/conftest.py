import time
from contextlib import contextmanager

import pytest

_LINES = pytest.StashKey[list]()


class Criterion:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion(request):
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_LINES, [])

    @contextmanager
    def run(number, title):
        c = Criterion()
        t0 = time.perf_counter()
        try:
            yield c
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            lines.append((number, f"FAIL  {number:>2}. {title}: {msg[:160]}"
                                  f" [{time.perf_counter() - t0:.1f}s]"))
            raise
        lines.append((number, f"PASS  {number:>2}. {title}: {c.detail}"
                              f" [{time.perf_counter() - t0:.1f}s]"))

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
