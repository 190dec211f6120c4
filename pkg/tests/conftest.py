import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MC_CACHE = os.environ.get("ISAMP_MC_CACHE", os.path.join(ROOT, ".mc_cache"))


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria record one line each; printed in the terminal summary
ACCEPTANCE = {}


def record_criterion(k, passed, detail):
    ACCEPTANCE[k] = (None if passed is None else bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        tag = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {k:>2}: {tag}  {detail}")
