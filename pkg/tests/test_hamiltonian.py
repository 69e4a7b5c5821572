import numpy as np
import pytest

from tfdmc import fockspace as fk
from tfdmc.fockspace import DoubledConfig, SectorSpec, enumerate_sector, sector_array
from tfdmc.hamiltonian import (
    ModelParams,
    aux_quadratic_operator,
    connected,
    connected_rows,
    dense_matrix,
    dense_matrix_single,
    hamiltonian_operator,
    mean_field_kappa,
    work_operator,
)
from tfdmc.lattice import build_lattice
from tfdmc.meanfield import free_reference


@pytest.fixture(scope="module")
def ring():
    return build_lattice(4, 1)


@pytest.fixture(scope="module")
def ring_spec(ring):
    return SectorSpec(ring, spinful=False, n_up=2)


def test_connected_row_1x4_tv(ring, ring_spec):
    """Connected row of |1100> under t-V: diagonal V (one occupied bond)
    plus the hops 0->3 and 1->2; verified against the dense matrix column."""
    op = hamiltonian_operator(ring, ModelParams(t=1.0, V=1.0))
    cfg = DoubledConfig(0b0011, 0, 0b0011, 0)
    conn = connected(ring_spec, op, cfg)
    assert conn[0][0] == cfg
    assert conn[0][1] == pytest.approx(1.0)
    offdiag = conn[1:]
    assert sorted(abs(a) for _, a in offdiag) == pytest.approx([1.0, 1.0])
    H = dense_matrix(ring_spec, op)
    cfgs = list(enumerate_sector(ring_spec))
    k = next(i for i, c in enumerate(cfgs) if c == cfg)
    assert np.count_nonzero(H[:, k]) == 3  # diagonal + two hop targets


def test_u_term_inert_spinless(ring, ring_spec):
    op = hamiltonian_operator(ring, ModelParams(t=1.0, U=7.3))
    for cfg in enumerate_sector(ring_spec):
        assert connected(ring_spec, op, cfg)[0][1] == 0.0


def test_dense_hermitian(ring, ring_spec):
    op = hamiltonian_operator(ring, ModelParams(t=1.0, V=1.0))
    H = dense_matrix(ring_spec, op)
    assert np.max(np.abs(H - H.T)) < 1e-12


def test_free_spectrum_from_single_particle(ring, ring_spec):
    """V=0 spinless eigenvalues are sums of single-particle energies
    -2t cos(2 pi k / 4)."""
    H = dense_matrix_single(ring_spec, ModelParams(t=1.0, V=0.0))
    levels = -2.0 * np.cos(2 * np.pi * np.arange(4) / 4)
    expect = sorted(
        levels[i] + levels[j] for i in range(4) for j in range(i + 1, 4)
    )
    assert np.allclose(np.linalg.eigvalsh(H), expect, atol=1e-12)


def test_spinful_2x2_max_diagonal():
    geom = build_lattice(2, 2)
    spec = SectorSpec(geom, spinful=True, n_up=2, n_down=2)
    op = hamiltonian_operator(geom, ModelParams(t=1.0, U=8.0))
    best = max(
        connected(spec, op, cfg)[0][1].real for cfg in enumerate_sector(spec)
    )
    assert best == pytest.approx(8.0 * min(spec.n_up, spec.n_down))


def test_row_norms_match_dense(ring, ring_spec):
    op = hamiltonian_operator(ring, ModelParams(t=1.0, V=0.7))
    H = dense_matrix(ring_spec, op)
    cfgs = list(enumerate_sector(ring_spec))
    for k, cfg in enumerate(cfgs):
        conn = connected(ring_spec, op, cfg)
        norm = sum(abs(a) ** 2 for _, a in conn)
        assert norm == pytest.approx(np.sum(np.abs(H[:, k]) ** 2), abs=1e-12)


def test_particle_numbers_conserved(ring, ring_spec):
    quad = free_reference(ring, ModelParams(), spinful=False)
    op = work_operator(ring, ModelParams(t=1.0, V=1.0), quad, 0.5, 0.5)
    for cfg in enumerate_sector(ring_spec):
        for new, _ in connected(ring_spec, op, cfg):
            assert bin(new.phys_up).count("1") == 2
            assert bin(new.aux_up).count("1") == 2


def test_work_operator_aux_sign(ring, ring_spec):
    """At beta = beta0 the auxiliary amplitudes are exactly minus those of
    the bare auxiliary quadratic term."""
    quad = free_reference(ring, ModelParams(), spinful=False)
    w = work_operator(ring, ModelParams(t=1.0, V=1.0), quad, 0.7, 0.7)
    aux = aux_quadratic_operator(ring, quad)
    phys = hamiltonian_operator(ring, ModelParams(t=1.0, V=1.0))
    for cfg in list(enumerate_sector(ring_spec))[:6]:
        expect = {}
        for new, amp in connected(ring_spec, phys, cfg):
            expect[new.masks()] = expect.get(new.masks(), 0) + amp
        for new, amp in connected(ring_spec, aux, cfg):
            expect[new.masks()] = expect.get(new.masks(), 0) - amp
        got = {}
        for new, amp in connected(ring_spec, w, cfg):
            got[new.masks()] = got.get(new.masks(), 0) + amp
        assert set(got) == {k for k, v in expect.items() if abs(v) > 0 or k == cfg.masks()}
        for k, v in got.items():
            assert v == pytest.approx(expect[k], abs=1e-12)


def test_connected_rows_match_scalar(ring, ring_spec):
    quad = free_reference(ring, ModelParams(), spinful=False)
    op = work_operator(ring, ModelParams(t=1.0, V=1.0), quad, 0.5, 1.0)
    cfgs = sector_array(ring_spec)
    flat, amps, offsets = connected_rows(ring_spec, op, cfgs)
    for k, cfg in enumerate(enumerate_sector(ring_spec)):
        got = {}
        for row, amp in zip(flat[offsets[k]:offsets[k + 1]], amps[offsets[k]:offsets[k + 1]]):
            key = tuple(int(v) for v in row)
            got[key] = got.get(key, 0) + amp
        expect = {}
        for new, amp in connected(ring_spec, op, cfg):
            expect[new.masks()] = expect.get(new.masks(), 0) + amp.real
        assert set(got) == set(expect)
        for key in got:
            assert got[key] == pytest.approx(expect[key], abs=1e-12)


def test_mean_field_kappa(ring):
    params = ModelParams(t=1.0, U=4.0)
    n = ring.n_sites
    dens = np.full(n, 0.5)
    quad = mean_field_kappa(ring, params, dens, dens)
    assert np.allclose(np.diag(quad.kappa_up), 2.0)
    assert quad.kappa_up[0, 1] == -1.0
    assert quad.e_shift == pytest.approx(-4.0 * n * 0.25)
    # U = 0 leaves the bare hopping and no shift
    quad0 = mean_field_kappa(ring, ModelParams(t=1.0, U=0.0), dens, dens)
    assert np.allclose(np.diag(quad0.kappa_up), 0.0)
    assert quad0.e_shift == 0.0
    with pytest.raises(ValueError):
        mean_field_kappa(ring, params, np.full(n, 1.2), dens)


def test_quadratic_requires_hermitian():
    from tfdmc.hamiltonian import QuadraticHam

    bad = np.array([[0.0, 1.0], [0.5, 0.0]])
    with pytest.raises(ValueError):
        QuadraticHam(kappa_up=bad)
