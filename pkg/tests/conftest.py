"""Criterion bookkeeping for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n, "title")`` are collected and a
``criterion n: PASS|FAIL`` line per criterion is printed in the summary,
followed by whatever the criterion's tests printed.
"""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "seen": False, "notes": [], "out": []})
    if report.when == "call" and report.capstdout:
        entry["out"].extend(report.capstdout.splitlines())
    if report.when == "call" or report.outcome != "passed":
        entry["seen"] = True
        if report.outcome != "passed":
            entry["ok"] = False
            entry["notes"].append(report.nodeid.split("::")[-1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        extra = f"  (failed: {', '.join(entry['notes'])})" if entry["notes"] else ""
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {entry['title']}{extra}")
        for line in entry["out"]:
            terminalreporter.write_line(f"    {line}")
