import pytest

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record a named acceptance criterion; the outcome is filled in by the report hook."""
    def register(number: int, title: str):
        ACCEPTANCE_RESULTS[request.node.nodeid] = [number, title, "FAIL", ""]
    return register


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    entry = ACCEPTANCE_RESULTS.get(item.nodeid)
    if entry is None or report.when != "call":
        return
    entry[2] = "PASS" if report.passed else "FAIL"
    if report.failed and call.excinfo is not None:
        entry[3] = str(call.excinfo.value).splitlines()[0][:160]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(ACCEPTANCE_RESULTS.values()):
        line = f"[{status}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
