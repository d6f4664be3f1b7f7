import warnings

import numpy as np
import pytest

from ivcalc.errors import IVWarning


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IVWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    reports = [r for key in ("passed", "failed") for r in terminalreporter.stats.get(key, [])
               if getattr(r, "when", None) == "call" and "test_acceptance.py::test_criterion_" in r.nodeid]
    if not reports:
        return
    terminalreporter.section("acceptance criteria")
    for r in sorted(reports, key=lambda r: int(r.nodeid.split("test_criterion_")[1].split("_")[0])):
        number = r.nodeid.split("test_criterion_")[1].split("_")[0]
        detail = dict(r.user_properties).get("detail", "")
        terminalreporter.write_line(f"criterion {number}: {'PASS' if r.passed else 'FAIL'}  {detail}")
