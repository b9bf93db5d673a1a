"""Collects acceptance outcomes and prints them after the run."""
import pytest

ACCEPTANCE = []


@pytest.fixture
def record():
    """``record(n, passed, detail)`` logs one acceptance line; call before asserting."""

    def _record(n, passed, detail):
        ACCEPTANCE.append((n, bool(passed), detail))

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
