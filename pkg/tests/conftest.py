import contextlib
import time

import pytest
from hypothesis import HealthCheck, settings

# reproducible runs; decoding-heavy examples can be slow on a loaded box
settings.register_profile("repo", derandomize=True, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

_ACCEPTANCE_LINES: list = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list = []

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one PASS/FAIL line for the run summary."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        c = _Criterion(number, title)
        start = time.perf_counter()
        ok = False
        try:
            yield c
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            detail = "; ".join(c.details)
            line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({elapsed:.2f}s)"
            _ACCEPTANCE_LINES.append((number, line + (f" -- {detail}" if detail else "")))
            print(_ACCEPTANCE_LINES[-1][1])

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
