"""t-U-V lattice Hamiltonian, quadratic mean-field operators, work operator.

Operators are exposed as "connected configuration" generators: given a basis
configuration x they list every x' with <x'|Op|x> != 0 together with the
amplitude.  The work operator pairs the interacting Hamiltonian on the
physical copy with a scaled quadratic Hamiltonian on the auxiliary copy,

    W = H (x) I  -  (beta0/beta) I (x) H0~ ,

so its connected set is the union of physical and auxiliary moves with the
auxiliary amplitudes carrying the minus sign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tfdmc import fockspace as fk
from tfdmc.fockspace import PU, PD, AU, AD, DoubledConfig, SectorSpec
from tfdmc.lattice import hopping_matrix

DENSE_CAP = 4000


@dataclass(frozen=True)
class ModelParams:
    """Couplings of the t-U-V model; t = 1 is the unit of energy."""

    t: float = 1.0
    U: float = 0.0
    V: float = 0.0


@dataclass(frozen=True)
class QuadraticHam:
    """One-body Hamiltonian kappa per spin plus a scalar energy shift."""

    kappa_up: np.ndarray
    kappa_down: np.ndarray | None = None
    e_shift: float = 0.0

    def __post_init__(self):
        for k in (self.kappa_up, self.kappa_down):
            if k is not None and np.max(np.abs(k - k.conj().T)) > 1e-12:
                raise ValueError("kappa must be Hermitian")

    def kappa(self, spin: int) -> np.ndarray:
        if spin == fk.UP or self.kappa_down is None:
            return self.kappa_up
        return self.kappa_down


@dataclass(frozen=True)
class Operator:
    """Sum of a physical-copy model term and a scaled auxiliary quadratic term."""

    geom: object
    phys_model: ModelParams | None = None
    aux_quad: QuadraticHam | None = None
    aux_scale: float = 1.0


def hamiltonian_operator(geom, params: ModelParams) -> Operator:
    """H (x) I: the interacting model acting on the physical copy."""
    return Operator(geom, phys_model=params)


def aux_quadratic_operator(geom, quad: QuadraticHam) -> Operator:
    """I (x) H0~: the quadratic reference acting on the auxiliary copy."""
    return Operator(geom, aux_quad=quad)


def work_operator(geom, params: ModelParams, quad: QuadraticHam, beta0: float, beta: float) -> Operator:
    """W = H (x) I - (beta0/beta) I (x) H0~; at beta = beta0 the prefactor is 1."""
    if beta <= 0 or beta0 <= 0:
        raise ValueError("beta and beta0 must be positive")
    return Operator(geom, phys_model=params, aux_quad=quad, aux_scale=-beta0 / beta)


def mean_field_kappa(geom, params: ModelParams, dens_up: np.ndarray, dens_down: np.ndarray) -> QuadraticHam:
    """Decouple the U term against given site densities.

    kappa_sigma = -t on bonds + U <n_{i,-sigma}> delta_ij, with the
    double-counting shift E = -U sum_i <n_up><n_down>.
    """
    dens_up = np.asarray(dens_up, dtype=float)
    dens_down = np.asarray(dens_down, dtype=float)
    for d in (dens_up, dens_down):
        if d.shape != (geom.n_sites,) or np.any(d < 0) or np.any(d > 1):
            raise ValueError("densities must be per-site values in [0, 1]")
    T = hopping_matrix(geom, params.t)
    kup = T + params.U * np.diag(dens_down)
    kdn = T + params.U * np.diag(dens_up)
    e_shift = -params.U * float(np.sum(dens_up * dens_down))
    return QuadraticHam(kappa_up=kup, kappa_down=kdn, e_shift=e_shift)


# ---------------------------------------------------------------------------
# connected configurations, single-config path

def _quad_terms(quad: QuadraticHam, spinful: bool):
    """Off-diagonal kappa entries as (spin, i, j, kappa_ij) with i != j."""
    terms = []
    spins = (fk.UP, fk.DOWN) if spinful else (fk.UP,)
    for spin in spins:
        k = quad.kappa(spin)
        for i in range(k.shape[0]):
            for j in range(k.shape[1]):
                if i != j and k[i, j] != 0:
                    terms.append((spin, i, j, k[i, j]))
    return terms


def diagonal_model_energy(geom, params: ModelParams, up_mask: int, down_mask: int) -> float:
    """Classical U/V energy of one copy's occupations."""
    e = params.U * bin(up_mask & down_mask).count("1")
    if params.V != 0.0:
        for i, j in geom.bonds:
            ni = ((up_mask >> i) & 1) + ((down_mask >> i) & 1)
            nj = ((up_mask >> j) & 1) + ((down_mask >> j) & 1)
            e += params.V * ni * nj
    return e


def connected(spec: SectorSpec, op: Operator, cfg: DoubledConfig) -> list[tuple[DoubledConfig, complex]]:
    """All (x', <x'|op|x>) with nonzero amplitude; the diagonal entry first.

    Particle numbers per copy and spin are conserved, so every x' lies in the
    same sector as x.
    """
    geom = op.geom
    out: list[tuple[DoubledConfig, complex]] = []
    diag = 0.0

    if op.phys_model is not None:
        m = op.phys_model
        diag += diagonal_model_energy(geom, m, cfg.phys_up, cfg.phys_down)
        spins = (fk.UP, fk.DOWN) if spec.spinful else (fk.UP,)
        for spin in spins:
            mask = cfg.mask(fk.PHYS, spin)
            for i, j in geom.bonds:
                for frm, to in ((i, j), (j, i)):
                    res = fk.hop_mask(mask, frm, to)
                    if res is not None:
                        new_mask, sign = res
                        out.append((cfg.replace_mask(fk.PHYS, spin, new_mask), -m.t * sign))

    if op.aux_quad is not None:
        q = op.aux_quad
        scale = op.aux_scale
        diag_aux = q.e_shift
        spins = (fk.UP, fk.DOWN) if spec.spinful else (fk.UP,)
        for spin in spins:
            k = q.kappa(spin)
            mask = cfg.mask(fk.AUX, spin)
            diag_aux += sum(k[s, s].real for s in fk.occupied_sites(mask, spec.n_sites))
        diag += scale * diag_aux
        for spin, i, j, kij in _quad_terms(q, spec.spinful):
            # kappa_ij f~^dag_i f~_j moves an auxiliary fermion j -> i
            res = fk.hop_mask(cfg.mask(fk.AUX, spin), j, i)
            if res is not None:
                new_mask, sign = res
                out.append((cfg.replace_mask(fk.AUX, spin, new_mask), scale * kij * sign))

    return [(cfg, complex(diag))] + out


# ---------------------------------------------------------------------------
# connected configurations, batched over (n, 4) uint64 arrays

def _directed_hop_columns(geom):
    frm, to = [], []
    for i, j in geom.bonds:
        frm += [i, j]
        to += [j, i]
    return np.asarray(frm, dtype=np.uint64), np.asarray(to, dtype=np.uint64)


def diagonal_model_energy_batch(geom, params: ModelParams, up: np.ndarray, dn: np.ndarray) -> np.ndarray:
    e = params.U * np.bitwise_count(up & dn).astype(float)
    if params.V != 0.0:
        occ = fk.occupations(up, geom.n_sites).astype(np.int64) + fk.occupations(dn, geom.n_sites).astype(np.int64)
        bi = np.array([b[0] for b in geom.bonds])
        bj = np.array([b[1] for b in geom.bonds])
        e += params.V * (occ[:, bi] * occ[:, bj]).sum(axis=1)
    return e


def connected_rows(spec: SectorSpec, op: Operator, cfgs: np.ndarray):
    """Batched connected sets.

    Returns (flat_cfgs, amps, offsets): configuration k owns the slice
    offsets[k]:offsets[k+1] of flat_cfgs/amps, with its diagonal entry first.
    """
    geom = op.geom
    n = cfgs.shape[0]
    idx_parts = [np.arange(n)]
    cfg_parts = [cfgs.copy()]
    diag = np.zeros(n)
    spins = (fk.UP, fk.DOWN) if spec.spinful else (fk.UP,)

    amp_parts: list[np.ndarray] = []

    if op.phys_model is not None:
        m = op.phys_model
        diag += diagonal_model_energy_batch(geom, m, cfgs[:, PU], cfgs[:, PD])
        frm, to = _directed_hop_columns(geom)
        for spin in spins:
            col = PU if spin == fk.UP else PD
            masks = cfgs[:, col]
            for c in range(frm.size):
                valid = fk.hop_valid(masks, frm[c], to[c])
                if not valid.any():
                    continue
                rows = np.nonzero(valid)[0]
                new_masks, signs = fk.hop_apply(masks[rows], frm[c], to[c])
                new_cfgs = cfgs[rows].copy()
                new_cfgs[:, col] = new_masks
                idx_parts.append(rows)
                cfg_parts.append(new_cfgs)
                amp_parts.append(-m.t * signs.astype(float))

    if op.aux_quad is not None:
        q = op.aux_quad
        scale = op.aux_scale
        diag_aux = np.full(n, q.e_shift)
        for spin in spins:
            col = AU if spin == fk.UP else AD
            kdiag = np.real(np.diag(q.kappa(spin)))
            occ = fk.occupations(cfgs[:, col], spec.n_sites).astype(float)
            diag_aux += occ @ kdiag
            k = q.kappa(spin)
            masks = cfgs[:, col]
            for i in range(spec.n_sites):
                for j in range(spec.n_sites):
                    if i == j or k[i, j] == 0:
                        continue
                    valid = fk.hop_valid(masks, np.uint64(j), np.uint64(i))
                    if not valid.any():
                        continue
                    rows = np.nonzero(valid)[0]
                    new_masks, signs = fk.hop_apply(masks[rows], np.uint64(j), np.uint64(i))
                    new_cfgs = cfgs[rows].copy()
                    new_cfgs[:, col] = new_masks
                    idx_parts.append(rows)
                    cfg_parts.append(new_cfgs)
                    amp_parts.append(scale * k[i, j].real * signs.astype(float))
        diag += scale * diag_aux

    idx = np.concatenate(idx_parts)
    flat = np.concatenate(cfg_parts, axis=0)
    amps = np.concatenate([diag] + amp_parts)

    order = np.argsort(idx, kind="stable")
    idx, flat, amps = idx[order], flat[order], amps[order]
    counts = np.bincount(idx, minlength=n)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return flat, amps, offsets


# ---------------------------------------------------------------------------
# dense matrices for small sectors

def dense_matrix(spec: SectorSpec, op: Operator, cap: int = DENSE_CAP) -> np.ndarray:
    """Dense matrix of ``op`` in the enumerated doubled basis."""
    cfgs = list(fk.enumerate_sector(spec, cap=cap))
    index = {c.masks(): k for k, c in enumerate(cfgs)}
    H = np.zeros((len(cfgs), len(cfgs)))
    for k, c in enumerate(cfgs):
        for cp, amp in connected(spec, op, c):
            H[index[cp.masks()], k] += amp.real
    return H


def dense_matrix_single(spec: SectorSpec, params: ModelParams, cap: int = DENSE_CAP) -> np.ndarray:
    """Dense matrix of the model on a single copy, in single-copy basis order."""
    if spec.single_copy_dim() > cap:
        raise ValueError(
            f"sector dimension {spec.single_copy_dim()} exceeds dense cap {cap}"
        )
    geom = spec.geom
    singles = list(fk.enumerate_single_masks(spec))
    index = {s: k for k, s in enumerate(singles)}
    dim = len(singles)
    H = np.zeros((dim, dim))
    spins = (fk.UP, fk.DOWN) if spec.spinful else (fk.UP,)
    for k, (up, dn) in enumerate(singles):
        H[k, k] += diagonal_model_energy(geom, params, up, dn)
        for spin in spins:
            mask = up if spin == fk.UP else dn
            for i, j in geom.bonds:
                for frm, to in ((i, j), (j, i)):
                    res = fk.hop_mask(mask, frm, to)
                    if res is None:
                        continue
                    new_mask, sign = res
                    new = (new_mask, dn) if spin == fk.UP else (up, new_mask)
                    H[index[new], k] += -params.t * sign
    return H
