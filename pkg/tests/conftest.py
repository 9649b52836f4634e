import numpy as np
import pytest

from ivrl.checks import tabular_fixture
from ivrl.env import generate
from ivrl.nuisance import oracle_nuisance


@pytest.fixture(scope="session")
def fixture_env():
    return tabular_fixture(1)


@pytest.fixture(scope="session")
def fixture_data(fixture_env):
    env, _, _ = fixture_env
    return generate(env, 300, 10, seed=5)


@pytest.fixture(scope="session")
def oracle(fixture_env):
    return oracle_nuisance(fixture_env[0])


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
