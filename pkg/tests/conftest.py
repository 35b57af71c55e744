from pathlib import Path

import numpy as np
import pytest

from delayplate import config
from delayplate.basis import PlateDomain, build_basis

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

SMALL_INI = """
[domain]
Lx = 1.0
Ly = 1.0
[basis]
nx = 3
ny = 3
[physics]
U = 0.5
b2 = 1.0
[delay]
n_s = 64
n_theta = 32
[time]
t_end = 8.0
init = eigen
init_index = 0, 1
[output]
stride = 16
checkpoint_every = 128
"""


@pytest.fixture(scope="session")
def unit_square():
    return PlateDomain(1.0, 1.0)


@pytest.fixture(scope="session")
def basis3(unit_square):
    return build_basis(unit_square, 3, 3)


@pytest.fixture(scope="session")
def basis4(unit_square):
    return build_basis(unit_square, 4, 4)


@pytest.fixture(scope="session")
def cache(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


@pytest.fixture
def small_cfg():
    return config.parse(SMALL_INI)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdict lines -----------------------------------------------

_verdicts = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marks = [m for m in getattr(report, "criterion", ())]
    if not marks:
        return
    number, name = marks
    ok = report.outcome == "passed" and not hasattr(report, "wasxfail")
    note = ""
    if hasattr(report, "wasxfail"):
        note = f" (expected failure: {report.wasxfail})"
    _verdicts.append((number, f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {name}{note}"))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = m.args


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_verdicts, key=lambda v: v[0]):
        terminalreporter.write_line(line)
