import pytest

_RESULTS: dict[str, list[str]] = {}
_TITLES: dict[str, str] = {}
_MEASURED: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    key = str(number)
    _TITLES[key] = title
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _RESULTS.setdefault(key, []).append(report.outcome)
        if report.when == "call":
            _MEASURED.setdefault(key, []).extend(f"{k}={_short(v)}" for k, v in report.user_properties)


def _short(value):
    return f"{value:.4g}" if isinstance(value, float) else str(value)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=int):
        outcomes = _RESULTS[key]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {key}: {verdict}  {_TITLES[key]} ({len(outcomes)} checks)")
        if _MEASURED.get(key):
            terminalreporter.write_line("    measured: " + ", ".join(_MEASURED[key]))
