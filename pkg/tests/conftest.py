import pytest

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.stash[_KEY] = {}


@pytest.fixture
def criterion(request):
    """Record a one-line detail for the acceptance criterion of the current test."""
    marker = request.node.get_closest_marker("criterion")
    store = request.config.stash[_KEY]

    def record(detail):
        store.setdefault(marker.args[0], {})["detail"] = detail
        print(f"criterion {marker.args[0]}: {detail}")

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and rep.passed:
        return
    entry = item.config.stash[_KEY].setdefault(marker.args[0], {})
    if rep.when == "call" or rep.failed:
        entry["outcome"] = "PASS" if rep.passed else "FAIL"


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash[_KEY]
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        entry = store[n]
        terminalreporter.write_line(f"[{entry.get('outcome', 'FAIL')}] criterion {n:2d}: {entry.get('detail', '')}")
