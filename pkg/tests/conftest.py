import logging

import pytest

from edgekv.cluster import LocalCluster

VOLA = {"path": "/v", "persistence": "volatile", "replication_factor": 3}
PERS = {"path": "/p", "persistence": "persistent", "replication_factor": 3}
TOPICS = {"path": "/cms/topics", "persistence": "volatile", "replication_factor": 3}


@pytest.fixture
def make_cluster(tmp_path):
    """Factory for loopback clusters that are torn down after the test."""
    made = []

    def make(n=3, pools=(VOLA, PERS), **kw):
        kw.setdefault("workdir", tmp_path / f"cluster{len(made)}")
        kw.setdefault("heartbeat_interval_ms", 100)
        kw.setdefault("failure_timeout_ms", 600)
        cl = LocalCluster(n, list(pools), **kw)
        made.append(cl)
        return cl.start()

    yield make
    # peers of a stopping node log its departure; that is expected here
    logging.getLogger("edgekv.node").setLevel(logging.ERROR)
    for cl in made:
        cl.close()
    logging.getLogger("edgekv.node").setLevel(logging.NOTSET)


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): one numbered acceptance criterion")


@pytest.fixture
def measured():
    """Numbers a criterion test wants printed next to its PASS/FAIL line."""
    return {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    if n in _CRITERIA and _CRITERIA[n][1] == "FAIL":
        return
    found = item.funcargs.get("measured") or {}
    detail = " ".join(f"{k}={v}" for k, v in found.items())
    _CRITERIA[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {status}  {title}  {detail}".rstrip())
