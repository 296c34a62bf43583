import pytest

# criterion number -> (title, list of (test id, passed, detail))
_CRITERIA: dict[int, tuple[str, list]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, (title, []))
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = getattr(item, "acceptance_detail", "")
        entry[1].append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, runs = _CRITERIA[n]
        ok = bool(runs) and all(passed for _, passed, _ in runs)
        details = "; ".join(d for _, _, d in runs if d)
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))
