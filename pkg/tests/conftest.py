"""Shared fixtures and the acceptance summary printed at the end of a run.

Acceptance tests carry ``@pytest.mark.criterion(n, title)`` and may attach
measured numbers through the ``measured`` fixture. After the run one line
per criterion reports PASS or FAIL together with those numbers.
"""

import json

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.fixture
def measured(request):
    """Dict whose contents end up on the criterion's summary line."""
    data = {}
    request.node.user_properties.append(("measured", data))
    return data


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        data = dict(item.user_properties).get("measured", {})
        _RESULTS[n] = {"title": title, "passed": rep.passed, "skipped": rep.skipped, "measured": data}


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        status = "SKIP" if r["skipped"] else ("PASS" if r["passed"] else "FAIL")
        extra = json.dumps(r["measured"], default=str) if r["measured"] else ""
        tr.write_line(f"criterion {n:2d} {status}: {r['title']} {extra}".rstrip())
