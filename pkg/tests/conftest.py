import pytest

_RESULTS = {}


@pytest.fixture
def record_criterion(request):
    """``record_criterion(n, text)`` before asserting; the outcome is filled in
    from the test report and printed in the terminal summary."""

    def record(number, text):
        _RESULTS.setdefault(number, []).append([request.node.nodeid, text, None])

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        for entries in _RESULTS.values():
            for e in entries:
                if e[0] == item.nodeid and e[2] is None:
                    e[2] = rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entries = _RESULTS[number]
        ok = all(e[2] for e in entries)
        detail = "; ".join(e[1] for e in entries)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
