"""Shared fixtures and the acceptance summary printed at the end of a run."""

import re

import pytest

_ACCEPTANCE_FILE = "test_acceptance.py"
_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_configure(config):
    config._acceptance = {}  # criterion number -> dict(name, outcome, detail)


@pytest.fixture
def record(request):
    """Attach a one-line detail string to the current acceptance criterion."""
    m = _CRITERION.search(request.node.name)
    store = request.config._acceptance

    def _record(detail: str):
        if m:
            entry = store.setdefault(int(m.group(1)), {"name": m.group(2), "outcome": "not run"})
            entry["detail"] = detail
        print(detail)

    return _record


def pytest_runtest_logreport(report):
    if _ACCEPTANCE_FILE not in report.nodeid:
        return
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    store = _config._acceptance
    entry = store.setdefault(int(m.group(1)), {"name": m.group(2), "outcome": "not run"})
    if report.when == "call" or report.failed:
        if report.failed:
            entry["outcome"] = "FAIL"
        elif report.passed and entry["outcome"] != "FAIL":
            entry["outcome"] = "PASS"


_config = None


def pytest_sessionstart(session):
    global _config
    _config = session.config


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = getattr(config, "_acceptance", {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        e = store[n]
        line = f"[{e['outcome']}] criterion {n} ({e['name'].replace('_', ' ')})"
        if e.get("detail"):
            line += f": {e['detail']}"
        terminalreporter.write_line(line)
