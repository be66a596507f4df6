import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion number -> (title, status, detail), filled in as acceptance tests finish
CRITERIA = {}


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run multi-hour experiments (desk-scale ablation)")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-hour experiment, needs --run-slow")
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or os.environ.get("GUIDEDCONV_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="multi-hour experiment; pass --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        detail = dict(item.user_properties).get("detail", "")
        if rep.skipped and not detail:
            detail = str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else ""
        CRITERIA[marker.args[0]] = (marker.args[1], status, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(CRITERIA):
        title, status, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status:4s}  {title}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
