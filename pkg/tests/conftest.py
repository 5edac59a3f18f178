"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")
    config._criteria = {}  # number -> [title, passed, notes]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    row = item.config._criteria.setdefault(number, [title, True, []])
    row[1] = row[1] and rep.passed
    row[2].extend(str(v) for k, v in item.user_properties if k == "detail" and str(v) not in row[2])


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(config._criteria):
        title, passed, notes = config._criteria[number]
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
        if notes:
            line += f"  [{'; '.join(notes)}]"
        terminalreporter.write_line(line)
