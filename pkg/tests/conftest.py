import numpy as np
import pytest

# criterion number -> (title, status, detail)
_ACCEPTANCE: dict = {}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when != "call" and not (rep.failed or rep.skipped):
        return
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    crit = marker.kwargs["criterion"]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    if rep.skipped and isinstance(rep.longrepr, tuple):
        detail = rep.longrepr[2]
    prev = _ACCEPTANCE.get(crit)
    if prev is None or _RANK[status] > _RANK[prev[1]]:
        _ACCEPTANCE[crit] = (marker.kwargs["title"], status, detail)
    elif detail:
        title, st, old = prev
        _ACCEPTANCE[crit] = (title, st, "; ".join(x for x in (old, detail) if x))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for crit in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[crit]
        line = f"criterion {crit}: {status}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
