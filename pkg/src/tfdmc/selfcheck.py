"""Embedded oracle suite behind the ``validate`` CLI subcommand.

Each check returns a CheckResult; corrupted evaluators can be injected to
verify that the checks really discriminate (mutation testing).
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from importlib import resources

import numpy as np

from tfdmc.ansatz import AnsatzConfig, MeanFieldAmplitude, NeuralAmplitude
from tfdmc.exactref import gibbs_energy
from tfdmc.fockspace import SectorSpec, enumerate_sector, occupied_sites, sector_array
from tfdmc.hamiltonian import ModelParams
from tfdmc.lattice import build_lattice
from tfdmc.meanfield import diagonalize, free_reference, pair_matrix
from tfdmc.observables import infinite_temperature_oracle, spin_correlations
from tfdmc.sampler import SampleBatch, transition_matrix


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _timed(name, fn):
    t0 = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name=name, passed=passed, detail=detail, seconds=time.perf_counter() - t0)


def cauchy_binet_check(amp_fn=None, betas=(0.0, 0.5, 1.0, 2.0), tol=1e-10) -> CheckResult:
    """Pair determinant vs the explicit sum over all Slater determinants on
    the spinless 4-site ring at half filling."""

    def run():
        geom = build_lattice(4, 1)
        spec = SectorSpec(geom, spinful=False, n_up=2)
        sd = diagonalize(free_reference(geom, ModelParams(), False))
        worst = 0.0
        for beta in betas:
            pm = pair_matrix(sd, beta)
            model = MeanFieldAmplitude(spec, pm)
            fn = amp_fn(model) if amp_fn is not None else model.log_amp
            w = np.exp(-0.5 * beta * sd.eps_up)
            U = sd.vecs_up
            cfgs = sector_array(spec)
            la = fn(cfgs)
            for k, cfg in enumerate(enumerate_sector(spec)):
                p = occupied_sites(cfg.phys_up, 4)
                q = occupied_sites(cfg.aux_up, 4)
                brute = sum(
                    np.prod(w[list(S)])
                    * np.linalg.det(U[np.ix_(p, list(S))])
                    * np.linalg.det(U[np.ix_(q, list(S))])
                    for S in itertools.combinations(range(4), 2)
                )
                amp = 0.0 if not np.isfinite(la[k].real) else np.exp(la[k])
                if abs(brute) > 1e-13:
                    worst = max(worst, abs(amp - brute) / abs(brute))
                else:
                    worst = max(worst, abs(amp))
        return worst < tol, f"max rel err {worst:.3e} (tol {tol:g})"

    return _timed("cauchy_binet", run)


def detailed_balance_check(tol=1e-12) -> CheckResult:
    """Exact composite-kernel matrix on the 4-site ring: stochastic rows and
    symmetric probability flux."""

    def run():
        geom = build_lattice(4, 1)
        spec = SectorSpec(geom, spinful=False, n_up=2)
        pm = pair_matrix(diagonalize(free_reference(geom, ModelParams(), False)), 0.7)
        model = MeanFieldAmplitude(spec, pm)
        K, _ = transition_matrix(spec, model.log_amp)
        la = model.log_amp(sector_array(spec)).real
        pi = np.exp(2 * (la - la[np.isfinite(la)].max()))
        pi[~np.isfinite(la)] = 0.0
        pi /= pi.sum()
        flux = pi[:, None] * K
        err_rows = np.max(np.abs(K.sum(axis=1) - 1))
        err_flux = np.max(np.abs(flux - flux.T))
        ok = err_rows < tol and err_flux < tol
        return ok, f"row-sum err {err_rows:.2e}, flux asymmetry {err_flux:.2e} (tol {tol:g})"

    return _timed("detailed_balance", run)


def gradient_check(n_components=40, tol_rel=1e-6, tol_abs=1e-8) -> CheckResult:
    """Spot finite-difference check of the network gradients (the acceptance
    suite runs the full sweep)."""

    def run():
        geom = build_lattice(4, 1)
        spec = SectorSpec(geom, spinful=False, n_up=2)
        pm = pair_matrix(diagonalize(free_reference(geom, ModelParams(), False)), 1.0)
        model = NeuralAmplitude(spec, pm, AnsatzConfig(tier="bivit", d_h=6, n_heads=2, n_layers=1, seed=11))
        rng = np.random.Generator(np.random.Philox(key=[11, 1]))
        theta = model.theta + 0.05 * rng.standard_normal(model.n_params)
        model = model.replace_theta(theta)
        cfgs = sector_array(spec)
        la = model.log_amp(cfgs)
        cfgs = cfgs[np.isfinite(la.real)][:4]
        _, o_mat = model.log_derivs(cfgs)
        h = 1e-5
        worst = 0.0
        for k in rng.choice(model.n_params, size=min(n_components, model.n_params), replace=False):
            tp, tm = theta.copy(), theta.copy()
            tp[k] += h
            tm[k] -= h
            fd = (model.replace_theta(tp).log_amp(cfgs) - model.replace_theta(tm).log_amp(cfgs)) / (2 * h)
            err = np.abs(o_mat[:, k] - fd)
            lim = tol_rel * np.maximum(np.abs(o_mat[:, k]), np.abs(fd)) + tol_abs
            worst = max(worst, float(np.max(err / lim)))
        return worst < 1.0, f"max err/tolerance {worst:.3f} over {n_components} components"

    return _timed("gradients", run)


def infinite_temperature_check(tol=1e-12) -> CheckResult:
    """Closed-form canonical correlators vs the exhaustive sector average on
    a 2x3 spinful lattice."""

    def run():
        geom = build_lattice(2, 3)
        spec = SectorSpec(geom, spinful=True, n_up=2, n_down=2)
        singles = list(enumerate_sector(spec, copy_product=False))
        cfgs = np.array([(up, dn, up, dn) for up, dn in singles], dtype=np.uint64)
        batch = SampleBatch(
            cfgs=cfgs,
            log_amps=np.zeros(len(singles), dtype=np.complex128),
            log_weights=np.zeros(len(singles)),
            chain_ids=np.arange(len(singles)),
            alpha_u=2.0,
        )
        measured = spin_correlations(spec, batch)
        oracle = infinite_temperature_oracle(spec, "canonical")
        err_c = np.max(np.abs(measured.c_mod - oracle.c_mod))
        err_s0 = abs(measured.s_zero())
        ok = err_c < tol and err_s0 < tol
        return ok, f"C_ss err {err_c:.2e}, S(0) = {err_s0:.2e} (tol {tol:g})"

    return _timed("infinite_temperature", run)


def ed_tracking_check(tol=1e-10) -> CheckResult:
    """Dense Gibbs energies on the 1x4 t-V ring against the stored golden
    reference."""

    def run():
        golden = resources.files("tfdmc.data").joinpath("ed_reference_1x4_V1.csv").read_text()
        rows = [line.split(",") for line in golden.strip().splitlines() if not line.startswith(("#", "beta"))]
        betas = np.array([float(r[0]) for r in rows])
        energies = np.array([float(r[1]) for r in rows])
        geom = build_lattice(4, 1)
        spec = SectorSpec(geom, spinful=False, n_up=2)
        ref = gibbs_energy(spec, ModelParams(t=1.0, V=1.0), betas)
        err = np.max(np.abs(ref.values - energies))
        return err < tol, f"max |E - golden| = {err:.2e} (tol {tol:g})"

    return _timed("ed_tracking", run)


def run_all() -> list[CheckResult]:
    return [
        cauchy_binet_check(),
        detailed_balance_check(),
        gradient_check(),
        infinite_temperature_check(),
        ed_tracking_check(),
    ]
