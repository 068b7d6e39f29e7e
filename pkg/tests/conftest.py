from __future__ import annotations

import numpy as np
import pytest

from mastrack.coupling import coupling_gains, weight_chain
from mastrack.scenarios import CERTIFIABLE_PARAMETERS, EXAMPLE_PARAMETERS, example_plant, example_topologies
from mastrack.synthesis import SynthesisOptions, synthesize_gains


@pytest.fixture(scope="session")
def plant():
    return example_plant()


@pytest.fixture(scope="session")
def topologies():
    return example_topologies()


@pytest.fixture(scope="session")
def weights(topologies):
    return {k: weight_chain(t, coupling_gains(t)) for k, t in enumerate(topologies, start=1)}


@pytest.fixture(scope="session")
def certified_gains(plant, weights):
    p = CERTIFIABLE_PARAMETERS
    return synthesize_gains(plant.A, plant.B, plant.C, p["beta"], p["l"], p["rho"],
                            {k: w.gamma for k, w in weights.items()})


@pytest.fixture(scope="session")
def best_effort_gains(plant, weights):
    p = EXAMPLE_PARAMETERS
    return synthesize_gains(plant.A, plant.B, plant.C, p["beta"], p["l"], p["rho"],
                            {k: w.gamma for k, w in weights.items()},
                            SynthesisOptions(best_effort=True))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        status, title, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title}" + (f" [{detail}]" if detail else ""))
