import numpy as np
import pytest

from ssgan import tensor as T


@pytest.fixture
def f64():
    """Run the test body with float64 as the default tensor dtype."""
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        notes = f"  ({', '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {n} {'PASS' if e['ok'] else 'FAIL'}: "
                                    f"{e['title']}{notes}")
