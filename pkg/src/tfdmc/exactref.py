"""Brute-force oracles: dense diagonalization, exact purifications, exact
fidelities, and an explicit anticommuting Fock-space builder.

These paths share nothing with the sampler or the network evaluators except
the single log-amplitude entry point, so agreement between an estimator and
its oracle is evidence against shared bugs rather than a tautology.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from tfdmc import fockspace as fk
from tfdmc.fockspace import SectorSpec
from tfdmc.hamiltonian import ModelParams, Operator, QuadraticHam, dense_matrix, dense_matrix_single

DENSE_CAP = 4000


@dataclass
class GibbsReference:
    """Canonical thermal energies from the full sector spectrum."""

    energies: np.ndarray
    betas: np.ndarray
    values: np.ndarray

    def energy(self, beta: float) -> float:
        e0 = self.energies.min()
        w = np.exp(-beta * (self.energies - e0))
        return float(np.sum(self.energies * w) / np.sum(w))


def gibbs_energy(spec: SectorSpec, params: ModelParams, betas, cap: int = DENSE_CAP) -> GibbsReference:
    """Exact canonical E(beta) on a grid, via dense diagonalization of the
    single-copy sector."""
    H = dense_matrix_single(spec, params, cap=cap)
    energies = np.linalg.eigvalsh(H)
    betas = np.asarray(betas, dtype=float)
    ref = GibbsReference(energies=energies, betas=betas, values=np.zeros_like(betas))
    ref.values = np.array([ref.energy(b) for b in betas])
    return ref


def free_fermion_canonical_energy(eps: np.ndarray, n_occ: int, beta: float) -> float:
    """Canonical free-fermion E(beta) by summing over level-occupation
    subsets; independent check of the dense route at V = 0."""
    eps = np.asarray(eps)
    es = np.array([eps[list(S)].sum() for S in itertools.combinations(range(eps.size), n_occ)])
    e0 = es.min()
    w = np.exp(-beta * (es - e0))
    return float(np.sum(es * w) / np.sum(w))


# ---------------------------------------------------------------------------
# dense vectors on the enumerated doubled sector

def dense_quadratic_single(spec: SectorSpec, quad: QuadraticHam, cap: int = DENSE_CAP) -> np.ndarray:
    """Dense many-body matrix of a quadratic Hamiltonian on one copy."""
    if spec.single_copy_dim() > cap:
        raise ValueError(f"sector dimension {spec.single_copy_dim()} exceeds cap {cap}")
    singles = list(fk.enumerate_single_masks(spec))
    index = {s: k for k, s in enumerate(singles)}
    dim = len(singles)
    H = np.full((dim, dim), 0.0)
    spins = (fk.UP, fk.DOWN) if spec.spinful else (fk.UP,)
    n = spec.n_sites
    for k, (up, dn) in enumerate(singles):
        diag = quad.e_shift
        for spin in spins:
            kap = quad.kappa(spin)
            mask = up if spin == fk.UP else dn
            diag += sum(kap[s, s].real for s in fk.occupied_sites(mask, n))
            for i in range(n):
                for j in range(n):
                    if i == j or kap[i, j] == 0:
                        continue
                    res = fk.hop_mask(mask, j, i)
                    if res is None:
                        continue
                    new_mask, sign = res
                    new = (new_mask, dn) if spin == fk.UP else (up, new_mask)
                    H[index[new], k] += kap[i, j].real * sign
        H[k, k] += diag
    return H


def purification_vector(spec: SectorSpec, quad: QuadraticHam, beta: float, cap: int = DENSE_CAP) -> np.ndarray:
    """Exact Gibbs purification of a quadratic Hamiltonian as a dense
    doubled-sector vector: amplitude(x, y~) = [exp(-beta H0 / 2)]_{x, y}.

    The auxiliary copy is the conjugated one; for the real Hamiltonians used
    here conjugation is trivial.  Unnormalized.
    """
    H = dense_quadratic_single(spec, quad, cap=cap)
    w, v = np.linalg.eigh(H)
    w = w - w.min()
    M = (v * np.exp(-0.5 * beta * w)) @ v.T
    return M.reshape(-1)


def amplitude_vector(spec: SectorSpec, log_amp_fn, cap: int = DENSE_CAP) -> np.ndarray:
    """Evaluate an amplitude model over the enumerated doubled sector.

    Scaled by exp(-max Re log amp): finite overall scale, zeros mapped to 0.
    """
    cfgs = fk.sector_array(spec, cap=cap)
    la = log_amp_fn(cfgs)
    finite = np.isfinite(la.real)
    if not finite.any():
        raise ValueError("amplitude vanishes on the whole sector")
    shift = la.real[finite].max()
    vec = np.zeros(cfgs.shape[0], dtype=np.complex128)
    vec[finite] = np.exp(la[finite] - shift)
    return vec


def vector_energy(vec: np.ndarray, H: np.ndarray) -> float:
    return float(np.real(vec.conj() @ H @ vec) / np.real(vec.conj() @ vec))


def overlap(a: np.ndarray, b: np.ndarray) -> float:
    return float(
        abs(a.conj() @ b) / np.sqrt(np.real(a.conj() @ a) * np.real(b.conj() @ b))
    )


def dense_fidelity(psi: np.ndarray, phi: np.ndarray, v_mat: np.ndarray) -> float:
    """|<psi|V phi>|^2 / (<psi|psi> <phi|V^dag V|phi>)."""
    vphi = v_mat @ phi
    num = abs(psi.conj() @ vphi) ** 2
    den = np.real(psi.conj() @ psi) * np.real(vphi.conj() @ vphi)
    return float(num / den)


def dense_operator(spec: SectorSpec, op: Operator, cap: int = DENSE_CAP) -> np.ndarray:
    return dense_matrix(spec, op, cap=cap)


# ---------------------------------------------------------------------------
# explicit Fock space with anticommutation (sign-convention ground truth)

def fock_creation(n_modes: int, mode: int) -> np.ndarray:
    """Dense creation operator on the 2^n_modes Fock space.

    Basis states are bitmasks with creation operators applied in ascending
    mode order; the Jordan-Wigner string counts occupied modes below
    ``mode``.
    """
    dim = 1 << n_modes
    op = np.zeros((dim, dim))
    for state in range(dim):
        if (state >> mode) & 1:
            continue
        below = state & ((1 << mode) - 1)
        sign = 1 - 2 * (bin(below).count("1") & 1)
        op[state | (1 << mode), state] = sign
    return op


def fock_state_index(occupied: list[int]) -> int:
    m = 0
    for s in occupied:
        m |= 1 << s
    return m


def geminal_power_vector(pair_matrix: np.ndarray, n_pairs: int) -> np.ndarray:
    """Expand [sum_{pq} A_pq c^dag_p cbar^dag_q]^N |0> on the doubled Fock
    space with physical modes 0..M-1 and auxiliary modes M..2M-1."""
    m = pair_matrix.shape[0]
    n_modes = 2 * m
    dim = 1 << n_modes
    cre = [fock_creation(n_modes, k) for k in range(n_modes)]
    gamma = np.zeros((dim, dim))
    for p in range(m):
        for q in range(m):
            if pair_matrix[p, q] != 0:
                gamma += pair_matrix[p, q].real * (cre[p] @ cre[m + q])
    vec = np.zeros(dim)
    vec[0] = 1.0
    for _ in range(n_pairs):
        vec = gamma @ vec
    return vec


def comb_dim(n: int, k: int) -> int:
    return comb(n, k)
