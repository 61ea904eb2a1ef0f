import os
from pathlib import Path

import numpy as np
import pytest

REPO = Path(__file__).resolve().parent.parent

_criteria: dict[int, tuple[str, str, str]] = {}


def data_dir() -> Path:
    return Path(os.environ.get("STAIR_DATA_DIR") or REPO / "data")


def dataset_path(name: str) -> Path:
    return data_dir() / f"{name}.csv"


def require_dataset(name: str) -> Path:
    p = dataset_path(name)
    if not p.is_file():
        pytest.skip(f"{name}.csv not found in {p.parent} (set STAIR_DATA_DIR)")
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = ""
        if rep.skipped and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2].removeprefix("Skipped: ")
        _criteria[num] = (status, text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_criteria):
        status, text, detail = _criteria[num]
        line = f"{status} criterion {num:>2}: {text}"
        if detail:
            line += f"  [{detail}]"
        tr.write_line(line)
