import pytest

_VERDICTS = pytest.StashKey[dict]()


class Verdicts:
    """Collects one line per acceptance criterion for the terminal summary."""

    def __init__(self, store: dict):
        self.store = store

    def __call__(self, number: int, title: str, limit_s: float, elapsed: float, checks: dict[str, bool], notes: str = ""):
        checks = dict(checks)
        checks[f"runtime {elapsed:.1f}s < {limit_s:g}s"] = elapsed < limit_s
        failed = [k for k, ok in checks.items() if not ok]
        status = "FAIL" if failed else "PASS"
        line = f"C{number} {status}  {title}  ({elapsed:.1f}s)"
        if notes:
            line += f"  {notes}"
        if failed:
            line += "  failed: " + "; ".join(failed)
        self.store[number] = line
        assert not failed, line


@pytest.fixture(scope="session")
def verdict(request):
    return Verdicts(request.config.stash.setdefault(_VERDICTS, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        terminalreporter.write_line(store[n])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion with its own verdict line")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" or not report.failed:
        return
    store = item.config.stash.setdefault(_VERDICTS, {})
    number, title = marker.args
    if number not in store:
        err = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        store[number] = f"C{number} FAIL  {title}  (raised {call.excinfo.typename}: {err[:200]})"
