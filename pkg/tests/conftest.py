import pytest

_RESULTS = {}


def pytest_runtest_logreport(report):
    if report.when == "call" or report.outcome == "failed":
        name = getattr(report, "criterion", None)
        if name:
            _RESULTS[name] = _RESULTS.get(name, True) and report.outcome == "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
