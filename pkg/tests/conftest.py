"""Per-criterion summary for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(k, "title")`` are tallied by k; a
criterion passes only if every test tagged with it passes.
"""
import pytest

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _results.setdefault(number, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.failed or report.skipped:
        entry["seen"] = True
        if report.failed or report.skipped:
            entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}")
