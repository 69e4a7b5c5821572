import numpy as np
import pytest

from tfdmc.fockspace import SectorSpec
from tfdmc.hamiltonian import ModelParams
from tfdmc.lattice import build_lattice
from tfdmc.meanfield import diagonalize, free_reference, pair_matrix


@pytest.fixture(scope="session")
def ring4():
    return build_lattice(4, 1)


@pytest.fixture(scope="session")
def torus23():
    return build_lattice(2, 3)


@pytest.fixture(scope="session")
def ring4_sector(ring4):
    return SectorSpec(ring4, spinful=False, n_up=2)


@pytest.fixture(scope="session")
def ring4_spectral(ring4):
    return diagonalize(free_reference(ring4, ModelParams(), spinful=False))


@pytest.fixture(scope="session")
def ring4_pm(ring4_spectral):
    return pair_matrix(ring4_spectral, 1.0)


@pytest.fixture(scope="session")
def spinful23_sector(torus23):
    return SectorSpec(torus23, spinful=True, n_up=2, n_down=2)


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, 0]))
