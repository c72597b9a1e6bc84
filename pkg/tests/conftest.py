import time
from contextlib import contextmanager

import pytest

_LINES = []


class _Record(dict):
    def note(self, **kw):
        self.update(kw)


@pytest.fixture
def criterion(request):
    """Context manager timing one acceptance criterion and logging a PASS/FAIL line."""

    @contextmanager
    def run(number, title, budget):
        rec = _Record()
        t0 = time.perf_counter()
        ok = False
        try:
            yield rec
            ok = True
        finally:
            el = time.perf_counter() - t0
            ok = ok and el < budget
            detail = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())
            line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title} [{detail}] {el:.1f}s (budget {budget}s)"
            _LINES.append((number, line))
            print(line)
        assert el < budget, f"criterion {number} took {el:.1f}s, budget {budget}s"

    return run


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)
