import numpy as np
import pytest

from zicomp.harness import desk_scenario, replicate_dataset
from zicomp.spatial import build_lattice, compute_basis


@pytest.fixture(scope="session")
def small_lattice():
    return build_lattice(4, 4)


@pytest.fixture(scope="session")
def small_basis(small_lattice):
    return compute_basis(small_lattice, q=5, rho=0.99)


@pytest.fixture(scope="session")
def desk_full_scenario():
    return desk_scenario("full", seed=11)


@pytest.fixture(scope="session")
def desk_replicate(desk_full_scenario):
    """One simulated desk-scale dataset with its truth and fit basis."""
    return replicate_dataset(desk_full_scenario, replicate=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
