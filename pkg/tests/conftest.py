import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from riemlmm.hmatrix import cholmod_available
from riemlmm.simulation import generate_dataset, scenario_random_intercepts, scenario_random_slope

BACKENDS = ["dense"] + (["cholmod"] if cholmod_available() else [])


def small_problem(shape="setting1", n=50, seed=11, rep=0):
    make = scenario_random_intercepts if shape == "setting1" else scenario_random_slope
    return generate_dataset(make(n=n, seed=seed), rep).problem


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
