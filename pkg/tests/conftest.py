from __future__ import annotations

import numpy as np
import pytest

from probe_release.config import load_scenario
from probe_release.controller import PriorKnowledge
from probe_release.distributions import BoundedDist
from probe_release.model import DemandModel, FlowParams, NoiseModel


@pytest.fixture(scope="session")
def stationary():
    return load_scenario("stationary")


@pytest.fixture(scope="session")
def flow() -> FlowParams:
    return FlowParams.from_capacity(alpha=0.65, x0_clean=9.0, F_max=16.0, eps_max=2.0, R=10.5)


@pytest.fixture(scope="session")
def noise() -> NoiseModel:
    return NoiseModel("uniform", 2.0)


@pytest.fixture(scope="session")
def demand() -> DemandModel:
    return DemandModel(BoundedDist.uniform(1.8, 5.4), BoundedDist.uniform(1.8, 5.4))


@pytest.fixture(scope="session")
def prior() -> PriorKnowledge:
    return PriorKnowledge(
        s=7, x0_clean=9.0, x0_min=13.0, x0_max=20.0, delta1=3.0, delta2=3.5, Lambda=11.0, mu1=-90.0
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
