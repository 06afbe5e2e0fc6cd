import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("agcd", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("agcd")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, tuple[str, str]] = {}
_NOTES: dict[int, list[str]] = {}


@pytest.fixture
def note(request):
    """Attach a detail string to the current test's acceptance criterion."""
    mark = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        if mark is not None:
            _NOTES.setdefault(mark.args[0], []).append(text)
    return add


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and short title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    if rep.failed:
        _CRITERIA[n] = (title, "FAIL")
    elif rep.when == "call" and n not in _CRITERIA:
        _CRITERIA[n] = (title, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}")
        for text in _NOTES.get(n, []):
            terminalreporter.write_line(f"    {text}")
