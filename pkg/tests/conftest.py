import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=200,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("quick", max_examples=30, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


# ---------------------------------------------------------------------------
# acceptance criteria: one PASS/FAIL line per criterion in the terminal summary
# ---------------------------------------------------------------------------

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion_detail(request):
    """Callable attaching a one-line measurement summary to the current criterion."""
    marker = request.node.get_closest_marker("criterion")
    store = request.config.stash[_CRITERIA]

    def note(text: str) -> None:
        if marker is not None:
            store.setdefault(marker.args[0], {})["detail"] = text
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = item.config.stash[_CRITERIA].setdefault(marker.args[0], {})
    entry["title"] = marker.args[1]
    if rep.when == "call" or rep.failed or rep.skipped:
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        if entry.get("status") in (None, "PASS"):
            entry["status"] = status


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    entries = config.stash[_CRITERIA]
    if not entries:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(entries):
        e = entries[num]
        line = f"{e.get('status', 'FAIL')} criterion {num:2d}: {e.get('title', '')}"
        if e.get("detail"):
            line += f" | {e['detail']}"
        terminalreporter.write_line(line)
