import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from erglab.models import homogeneous, identity_uniform, markov_random  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

P_HOM = np.array([[0.7, 0.3], [0.9, 0.1]])
Q_SYM = np.array([[0.9, 0.1], [0.1, 0.9]])


@pytest.fixture(scope="session")
def hom():
    return homogeneous()


@pytest.fixture(scope="session")
def iu():
    return identity_uniform()


@pytest.fixture(scope="session")
def mr():
    return markov_random()


@pytest.fixture(scope="session", params=["homogeneous", "identity_uniform", "markov_random"])
def ref_model(request):
    return {"homogeneous": homogeneous, "identity_uniform": identity_uniform, "markov_random": markov_random}[
        request.param
    ]()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        terminalreporter.write_line(results[k])
