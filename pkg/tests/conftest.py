import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_CRITERIA: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.fixture
def evidence(request):
    """Free-form notes a criterion test attaches to its summary line."""
    notes: list[str] = []
    request.node._evidence = notes
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        notes = "; ".join(getattr(item, "_evidence", []))
        _CRITERIA.append(("PASS" if rep.passed else "FAIL", marker.args[0], notes))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, notes in _CRITERIA:
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({notes})" if notes else ""))
