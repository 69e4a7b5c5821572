import numpy as np
import pytest
from scipy import stats

from tfdmc import fockspace as fk
from tfdmc.ansatz import MeanFieldAmplitude
from tfdmc.fockspace import DoubledConfig, SectorSpec, enumerate_sector, sector_array, swap_copies
from tfdmc.hamiltonian import ModelParams
from tfdmc.lattice import build_lattice
from tfdmc.meanfield import diagonalize, free_reference, pair_matrix
from tfdmc.sampler import (
    ChainPool,
    KernelMix,
    TYPE_DOUBLON,
    TYPE_EXCHANGE,
    TYPE_HOP,
    UmbrellaSpec,
    list_diag_moves,
    list_type_moves,
    propose_diag_exchange,
    propose_site_exchange,
    propose_swap,
    transition_matrix,
)


class TableAmplitude:
    """Amplitude evaluator backed by a precomputed table; used to drive the
    kernel logic at full speed in distribution tests."""

    def __init__(self, spec, log_amp_fn):
        cfgs = sector_array(spec)
        self.table = {tuple(c): la for c, la in zip(cfgs.tolist(), log_amp_fn(cfgs))}

    def log_amp(self, cfgs):
        return np.array([self.table[tuple(c)] for c in np.asarray(cfgs, dtype=np.uint64).reshape(-1, 4).tolist()])


@pytest.fixture(scope="module")
def ring_problem():
    geom = build_lattice(4, 1)
    spec = SectorSpec(geom, spinful=False, n_up=2)
    pm = pair_matrix(diagonalize(free_reference(geom, ModelParams(), False)), 0.7)
    model = MeanFieldAmplitude(spec, pm)
    return spec, model


def test_kernel_mix_validation():
    with pytest.raises(ValueError):
        KernelMix(0.5, 0.5, 0.5)
    mix = KernelMix()
    assert (mix.p_site_exchange, mix.p_diag_exchange, mix.p_swap) == (0.79, 0.20, 0.01)


def test_spinless_only_hops(ring_problem):
    spec, _ = ring_problem
    cfg = DoubledConfig(0b0011, 0, 0b0101, 0)
    assert len(list_type_moves(spec, cfg, fk.PHYS, TYPE_HOP)) == 2
    rng = np.random.Generator(np.random.Philox(key=[0, 0]))
    for _ in range(20):
        new, ratio = propose_site_exchange(spec, cfg, rng)
        # spinless: only hop moves exist, each changing one copy's mask
        assert (new.phys_up != cfg.phys_up) != (new.aux_up != cfg.aux_up) or new == cfg


def test_spinful_move_types():
    geom = build_lattice(2, 2)
    spec = SectorSpec(geom, spinful=True, n_up=2, n_down=2)
    # spin exchange requires opposite single spins on a bond
    cfg = DoubledConfig(0b0001, 0b0010, 0b0001, 0b0010)
    ex = list_type_moves(spec, cfg, fk.PHYS, TYPE_EXCHANGE)
    assert DoubledConfig(0b0010, 0b0001, 0b0001, 0b0010) in ex
    # doublon hop needs a doubly occupied site next to an empty one
    cfg2 = DoubledConfig(0b0001, 0b0001, 0b0001, 0b0001)
    dbl = list_type_moves(spec, cfg2, fk.PHYS, TYPE_DOUBLON)
    assert DoubledConfig(0b0010, 0b0010, 0b0001, 0b0001) in dbl
    assert len(dbl) == 2  # two empty neighbors of site 0: sites 1 and 2
    # hopping onto an occupied site never appears
    for new in list_type_moves(spec, cfg2, fk.PHYS, TYPE_HOP):
        assert bin(new.phys_up & new.phys_up >> 0).count("1") == 1


def test_exchange_is_self_inverse():
    geom = build_lattice(2, 2)
    spec = SectorSpec(geom, spinful=True, n_up=1, n_down=1)
    cfg = DoubledConfig(0b0001, 0b0010, 0b0100, 0b1000)
    for new in list_type_moves(spec, cfg, fk.PHYS, TYPE_EXCHANGE):
        back = list_type_moves(spec, new, fk.PHYS, TYPE_EXCHANGE)
        assert cfg in back


def test_diag_move_applies_to_both_copies(ring_problem):
    spec, _ = ring_problem
    cfg = DoubledConfig(0b0011, 0, 0b0011, 0)
    for new in list_diag_moves(spec, cfg):
        assert new.phys_up == new.aux_up
    # applying the same move twice returns to the start
    rng = np.random.Generator(np.random.Philox(key=[1, 0]))
    new, ratio = propose_diag_exchange(spec, cfg, rng)
    assert new != cfg
    back_moves = list_diag_moves(spec, new)
    assert cfg in back_moves


def test_swap_proposal(ring_problem):
    spec, _ = ring_problem
    cfg = DoubledConfig(0b0011, 0, 0b0101, 0)
    new, ratio = propose_swap(spec, cfg)
    assert ratio == 1.0
    assert new == swap_copies(cfg)
    assert propose_swap(spec, new)[0] == cfg


def test_detailed_balance_matrix(ring_problem):
    """pi_x K[x, x'] symmetric to 1e-12 and stochastic rows."""
    spec, model = ring_problem
    K, cfgs = transition_matrix(spec, model.log_amp)
    la = model.log_amp(sector_array(spec)).real
    pi = np.zeros(la.size)
    fin = np.isfinite(la)
    pi[fin] = np.exp(2 * (la[fin] - la[fin].max()))
    pi /= pi.sum()
    assert np.max(np.abs(K.sum(axis=1) - 1.0)) < 1e-12
    flux = pi[:, None] * K
    assert np.max(np.abs(flux - flux.T)) < 1e-12


def test_detailed_balance_spinful_umbrella():
    geom = build_lattice(2, 2)
    spec = SectorSpec(geom, spinful=True, n_up=1, n_down=1)
    pm = pair_matrix(diagonalize(free_reference(geom, ModelParams(), True)), 0.9)
    model = MeanFieldAmplitude(spec, pm)
    alpha_u = 1.4
    K, cfgs = transition_matrix(spec, model.log_amp, alpha_u=alpha_u)
    la = model.log_amp(sector_array(spec)).real
    q = np.zeros(la.size)
    fin = np.isfinite(la)
    q[fin] = np.exp(alpha_u * (la[fin] - la[fin].max()))
    q /= q.sum()
    flux = q[:, None] * K
    assert np.max(np.abs(K.sum(axis=1) - 1.0)) < 1e-12
    assert np.max(np.abs(flux - flux.T)) < 1e-12


def test_ergodicity_on_support(ring_problem):
    """The kernel's transition graph is strongly connected on the
    configurations carrying non-negligible weight (states below the
    determinant noise floor are unreachable by construction)."""
    spec, model = ring_problem
    K, cfgs = transition_matrix(spec, model.log_amp)
    la = model.log_amp(sector_array(spec)).real
    support = np.isfinite(la) & (la > la[np.isfinite(la)].max() - 30)
    A = (K[np.ix_(support, support)] > 1e-30).astype(object)
    reach = np.linalg.matrix_power(A + np.eye(A.shape[0], dtype=object), A.shape[0])
    assert np.all(np.array(reach, dtype=float) > 0)


def test_stationarity_chi2(ring_problem):
    """Empirical long-run distribution matches |Psi|^2 (chi-squared)."""
    spec, model = ring_problem
    table = TableAmplitude(spec, model.log_amp)
    pool = ChainPool(spec, 1, seed=123)
    pool.refresh(table)
    pool.run_sweeps(table, 50)

    cfgs = sector_array(spec)
    la = model.log_amp(cfgs).real
    fin = np.isfinite(la)
    pi = np.zeros(la.size)
    pi[fin] = np.exp(2 * (la[fin] - la[fin].max()))
    pi /= pi.sum()
    index = {tuple(c): k for k, c in enumerate(cfgs.tolist())}

    n_steps = 125_000  # sweeps of 4 steps each: 5e5 proposals
    counts = np.zeros(la.size)
    for _ in range(n_steps // (4 * 50)):
        pool.run_sweeps(table, 50)
        counts[index[tuple(pool.masks[0].tolist())]] += 1
    visited = counts.sum()
    keep = pi * visited >= 5
    chi2 = np.sum((counts[keep] - visited * pi[keep]) ** 2 / (visited * pi[keep]))
    # note the chain is subsampled every 50 sweeps, so bins are independent
    p = 1 - stats.chi2.cdf(chi2, keep.sum() - 1)
    assert p > 0.01, f"chi2 {chi2:.1f} over {keep.sum()} bins, p={p:.4f}"
    assert counts[~fin].sum() == 0


def test_rule_frequencies():
    """Per-rule proposal frequencies match (0.79, 0.20, 0.01) within
    multinomial error."""
    geom = build_lattice(4, 1)
    spec = SectorSpec(geom, spinful=False, n_up=2)
    pm = pair_matrix(diagonalize(free_reference(geom, ModelParams(), False)), 0.7)
    model = MeanFieldAmplitude(spec, pm)
    pool = ChainPool(spec, 64, seed=5)
    pool.refresh(model)
    batch = pool.run_pass(model, 30)
    total = sum(p for p, _ in batch.acceptance.values())
    for key, target in (("site_exchange", 0.79), ("diag_exchange", 0.20), ("swap", 0.01)):
        p, _ = batch.acceptance[key]
        sigma = np.sqrt(target * (1 - target) / total)
        assert abs(p / total - target) < 5 * sigma


def test_umbrella_weights(ring_problem):
    spec, model = ring_problem
    pool = ChainPool(spec, 16, seed=9, umbrella=UmbrellaSpec(alpha_u=2.0))
    pool.refresh(model)
    batch = pool.run_pass(model, 10)
    assert np.allclose(batch.weights(), 1.0)  # Born sampling: equal weights
    pool15 = ChainPool(spec, 16, seed=9, umbrella=UmbrellaSpec(alpha_u=1.5))
    pool15.refresh(model)
    b15 = pool15.run_pass(model, 10)
    assert np.std(b15.weights()) > 0


def test_umbrella_estimators_agree():
    """Weighted estimators with alpha_u != 2 match the exact sector average
    (self-normalized importance identity), here in enumeration form."""
    geom = build_lattice(4, 1)
    spec = SectorSpec(geom, spinful=False, n_up=2)
    pm = pair_matrix(diagonalize(free_reference(geom, ModelParams(), False)), 0.9)
    model = MeanFieldAmplitude(spec, pm)
    cfgs = sector_array(spec)
    la = model.log_amp(cfgs)
    fin = np.isfinite(la.real)
    cfgs, la = cfgs[fin], la[fin]
    alpha_u = 1.3
    # samples "drawn from" q = |Psi|^alpha_u enumerated exactly with their
    # importance weights; the weighted mean must equal the Born average
    occ0 = fk.occupations(cfgs[:, fk.PU], 4)[:, 0].astype(float)
    q = np.exp(alpha_u * (la.real - la.real.max()))
    w = np.exp((2 - alpha_u) * (la.real - la.real.max()))
    born = np.exp(2 * (la.real - la.real.max()))
    lhs = np.sum(q * w * occ0) / np.sum(q * w)
    rhs = np.sum(born * occ0) / np.sum(born)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_stuck_chain_diagnostic():
    """At beta = 0 the state lives on x = y~ only; with single-copy moves
    alone every proposal hits a zero of Psi and the chains report stuck."""
    geom = build_lattice(1, 2)
    spec = SectorSpec(geom, spinful=False, n_up=1)
    pm = pair_matrix(diagonalize(free_reference(geom, ModelParams(), False)), 0.0)
    model = MeanFieldAmplitude(spec, pm)
    pool = ChainPool(spec, 4, seed=3, mix=KernelMix(1.0, 0.0, 0.0))
    pool.refresh(model)
    batch = pool.run_pass(model, 4)
    assert batch.stuck_chains == [0, 1, 2, 3]


def test_proposal_counts_as_rejection():
    geom = build_lattice(2, 2)
    spec = SectorSpec(geom, spinful=True, n_up=2, n_down=2)
    # a fully stacked configuration has no valid doublon move target and no
    # exchange; drawing those types must return the unchanged configuration
    cfg = DoubledConfig(0b0011, 0b0011, 0b0011, 0b0011)
    assert list_type_moves(spec, cfg, fk.PHYS, TYPE_EXCHANGE) == []
    rng = np.random.Generator(np.random.Philox(key=[2, 2]))
    seen_unchanged = False
    for _ in range(60):
        new, ratio = propose_site_exchange(spec, cfg, rng)
        if new == cfg:
            assert ratio == 1.0
            seen_unchanged = True
    assert seen_unchanged
