import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfdmc.lattice import build_lattice, displacement, hopping_matrix


def brute_force_bonds(Lx, Ly):
    """Independent neighbor scan: unordered pairs within unit minimal-image
    distance, self-pairs excluded."""
    n = Lx * Ly
    pairs = set()
    for i in range(n):
        for j in range(i + 1, n):
            dx = min((j % Lx - i % Lx) % Lx, (i % Lx - j % Lx) % Lx)
            dy = min((j // Lx - i // Lx) % Ly, (i // Lx - j // Lx) % Ly)
            if dx + dy == 1:
                pairs.add((i, j))
    return pairs


def test_4x4_counts():
    geom = build_lattice(4, 4)
    assert geom.n_sites == 16
    assert geom.n_bonds == 32
    # every site has exactly 4 distinct neighbors
    degree = np.zeros(16, dtype=int)
    for i, j in geom.bonds:
        degree[i] += 1
        degree[j] += 1
    assert np.all(degree == 4)


def test_smallest_torus_dedup():
    geom = build_lattice(1, 2)
    assert geom.bonds == ((0, 1),)


def test_2x3_bonds_match_brute_force():
    geom = build_lattice(2, 3)
    assert set(geom.bonds) == brute_force_bonds(2, 3)
    assert geom.n_sites == 6


@pytest.mark.parametrize("Lx,Ly", [(3, 3), (4, 1), (2, 2), (5, 3)])
def test_bonds_match_brute_force(Lx, Ly):
    geom = build_lattice(Lx, Ly)
    assert set(geom.bonds) == brute_force_bonds(Lx, Ly)


def test_rejects_single_site():
    with pytest.raises(ValueError):
        build_lattice(1, 1)


def test_displacement_examples():
    geom = build_lattice(4, 4)
    assert tuple(displacement(geom, 0, 1)) == (1, 0)
    # site 15 = (3, 3); minimal image of (3, 3) is (-1, -1) -> labels (1, 1)
    assert tuple(displacement(geom, 0, 15)) == (1, 1)
    assert tuple(displacement(geom, 5, 5)) == (0, 0)


def test_displacement_self_zero():
    geom = build_lattice(3, 3)
    for i in range(geom.n_sites):
        assert tuple(displacement(geom, i, i)) == (0, 0)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(min_value=2, max_value=5),
    st.integers(min_value=1, max_value=5),
    st.data(),
)
def test_translation_consistency(Lx, Ly, data):
    geom = build_lattice(Lx, Ly)
    i = data.draw(st.integers(0, geom.n_sites - 1))
    j = data.draw(st.integers(0, geom.n_sites - 1))
    dx = data.draw(st.integers(0, Lx - 1))
    dy = data.draw(st.integers(0, Ly - 1))
    ti, tj = geom.translate(i, dx, dy), geom.translate(j, dx, dy)
    assert np.array_equal(geom.disp_mod[i, j], geom.disp_mod[ti, tj])
    assert np.array_equal(displacement(geom, i, j), displacement(geom, ti, tj))


def test_mod_displacement_components_in_range():
    geom = build_lattice(4, 3)
    assert geom.disp_mod[..., 0].min() >= 0 and geom.disp_mod[..., 0].max() < 4
    assert geom.disp_mod[..., 1].min() >= 0 and geom.disp_mod[..., 1].max() < 3
    assert geom.disp_min[..., 0].max() <= 2 and geom.disp_min[..., 1].max() <= 1


def test_mod_displacement_is_bijection():
    geom = build_lattice(4, 3)
    for d in range(geom.n_sites):
        dx, dy = d % geom.Lx, d // geom.Lx
        targets = {geom.translate(i, dx, dy) for i in range(geom.n_sites)}
        assert targets == set(range(geom.n_sites))


def test_momentum_grid_periodicity():
    geom = build_lattice(4, 3)
    for qx, qy in geom.qgrid:
        assert abs(np.exp(1j * qx * geom.Lx) - 1) < 1e-12
        assert abs(np.exp(1j * qy * geom.Ly) - 1) < 1e-12


def test_binned_sum_recovers_double_sum():
    # summing an observable binned by the wrapped displacement over all d
    # reproduces the unbinned double sum exactly
    geom = build_lattice(3, 4)
    vals = np.arange(geom.n_sites, dtype=float) ** 1.5
    full = sum(vals[i] * vals[j] for i in range(geom.n_sites) for j in range(geom.n_sites))
    by_d = 0.0
    for d in range(geom.n_sites):
        dx, dy = d % geom.Lx, d // geom.Lx
        by_d += sum(vals[i] * vals[geom.translate(i, dx, dy)] for i in range(geom.n_sites))
    assert abs(by_d - full) < 1e-9


def test_hopping_matrix_symmetric():
    geom = build_lattice(3, 3)
    T = hopping_matrix(geom, 1.0)
    assert np.array_equal(T, T.T)
    assert T[0, 1] == -1.0
    assert np.trace(T) == 0.0
