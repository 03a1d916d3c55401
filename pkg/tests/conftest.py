"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_results = {}


def _criterion(item):
    m = item.get_closest_marker("acceptance")
    return None if m is None else (m.args[0], m.args[1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    crit = _criterion(item)
    if crit is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        elapsed = getattr(item, "_elapsed", None)
        _results[crit] = (rep.passed, elapsed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), (ok, elapsed) in sorted(_results.items()):
        took = "" if elapsed is None else f" ({elapsed:.2f} s)"
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {title}{took}")
