import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

import pytest

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture()
def record(request):
    """record(n, ok, detail): log one acceptance line for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def _record(n, ok, detail):
        lines.append((n, bool(ok), detail))
        return bool(ok)
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(lines, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
