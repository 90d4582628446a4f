import pytest

_results: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    number, name = marker.args
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    detail = item.user_properties and dict(item.user_properties).get("detail", "") or ""
    _results[number] = (status, name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, name, detail = _results[number]
        line = f"[{status}] {number:>2}. {name}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
