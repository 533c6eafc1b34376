"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}
_TITLES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _TITLES[mark.args[0]] = mark.args[1]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    _RESULTS[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _TITLES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_TITLES):
        status, title, detail = _RESULTS.get(number, ("NOT RUN", _TITLES[number], ""))
        line = f"criterion {number:2d} {status:7s} {title}"
        if detail:
            line += f" | {detail}"
        terminalreporter.write_line(line)
