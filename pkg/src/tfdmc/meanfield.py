"""Mean-field references: spectra, thermal pair orbitals, thermal Hartree-Fock.

The central object is the temperature-dependent pair matrix

    phi(beta)[p, q] = sum_mu exp(-beta * eps_mu / 2) phi_mu(p) phi_mu(q)*

whose N x N sub-determinants are the amplitudes of the mean-field thermal
purification in a fixed particle-number sector.  At beta = 0 completeness
makes it the identity; its eigenvalues are exp(-beta * eps_mu / 2) at any
temperature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from tfdmc.fockspace import SectorSpec
from tfdmc.hamiltonian import ModelParams, QuadraticHam
from tfdmc.lattice import hopping_matrix

DEGENERACY_TOL = 1e-10


@dataclass(frozen=True)
class SpectralData:
    """Eigen-decomposition of a quadratic Hamiltonian, one block per spin."""

    eps_up: np.ndarray
    vecs_up: np.ndarray
    eps_down: np.ndarray | None = None
    vecs_down: np.ndarray | None = None
    e_shift: float = 0.0

    def block(self, spin: int):
        if spin == 0 or self.eps_down is None:
            return self.eps_up, self.vecs_up
        return self.eps_down, self.vecs_down


@dataclass(frozen=True)
class PairMatrix:
    """Thermal pair-orbital matrix per spin block at inverse temperature beta."""

    beta: float
    phi_up: np.ndarray
    phi_down: np.ndarray | None = None

    def block(self, spin: int) -> np.ndarray:
        if spin == 0 or self.phi_down is None:
            return self.phi_up
        return self.phi_down

    @property
    def n_sites(self) -> int:
        return self.phi_up.shape[0]


def _canonical_columns(eps: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Deterministic tie-break inside degenerate clusters.

    Within each cluster of equal eigenvalues, columns are ordered
    lexicographically on their rounded entries and the sign is fixed so the
    first entry above tolerance is positive.  The pair matrix itself is
    invariant under intra-cluster rotations; this only pins SpectralData for
    bit-reproducibility.
    """
    vecs = vecs.copy()
    n = eps.size
    start = 0
    while start < n:
        stop = start + 1
        while stop < n and abs(eps[stop] - eps[start]) <= DEGENERACY_TOL * max(1.0, abs(eps[start])):
            stop += 1
        block = vecs[:, start:stop]
        for c in range(block.shape[1]):
            col = block[:, c]
            lead = np.nonzero(np.abs(col) > 1e-8)[0]
            if lead.size and col[lead[0]].real < 0:
                block[:, c] = -col
        order = np.lexsort(np.round(block[::-1], 9))
        vecs[:, start:stop] = block[:, order]
        start = stop
    return vecs


def diagonalize(quad: QuadraticHam) -> SpectralData:
    """Complete spectral decomposition of a quadratic Hamiltonian."""
    eps_up, vecs_up = np.linalg.eigh(quad.kappa_up)
    vecs_up = _canonical_columns(eps_up, vecs_up)
    if quad.kappa_down is None:
        return SpectralData(eps_up, vecs_up, e_shift=quad.e_shift)
    eps_dn, vecs_dn = np.linalg.eigh(quad.kappa_down)
    vecs_dn = _canonical_columns(eps_dn, vecs_dn)
    return SpectralData(eps_up, vecs_up, eps_dn, vecs_dn, e_shift=quad.e_shift)


def thermal_weights(eps: np.ndarray, beta: float) -> np.ndarray:
    """w_mu = exp(-beta eps_mu / 2); note u_mu^2 + v_mu^2 = 1 with
    u = 1/sqrt(1 + w^2), v = w u."""
    return np.exp(-0.5 * beta * np.asarray(eps))


def pair_matrix(spectral: SpectralData, beta: float) -> PairMatrix:
    """Assemble phi(beta) = V diag(w) V^dagger per spin block."""
    if not np.isfinite(beta) or beta < 0:
        raise ValueError("beta must be finite and nonnegative")

    def build(eps, vecs):
        if beta == 0.0:
            # completeness is exact; the numerical product U U^dag is not
            return np.eye(vecs.shape[0])
        w = thermal_weights(eps, beta)
        return (vecs * w) @ vecs.conj().T

    phi_up = build(spectral.eps_up, spectral.vecs_up)
    if spectral.eps_down is None:
        return PairMatrix(beta=beta, phi_up=phi_up)
    return PairMatrix(beta=beta, phi_up=phi_up, phi_down=build(spectral.eps_down, spectral.vecs_down))


def free_reference(geom, params: ModelParams, spinful: bool) -> QuadraticHam:
    """Bare hopping reference (interactions switched off)."""
    T = hopping_matrix(geom, params.t)
    return QuadraticHam(kappa_up=T, kappa_down=T.copy() if spinful else None)


# ---------------------------------------------------------------------------
# thermal Hartree-Fock

@dataclass
class ThermalHFState:
    """Converged (or best-effort) thermal Hartree-Fock solution."""

    y_phi: dict
    y_d: dict
    q_phi: dict
    q_d: dict
    dens_up: np.ndarray
    dens_down: np.ndarray
    free_energy: float
    entropy: float
    converged: bool
    grad_norm: float
    trace: list = field(default_factory=list, repr=False)

    def quadratic(self, geom, params: ModelParams) -> QuadraticHam:
        T = hopping_matrix(geom, params.t)
        return QuadraticHam(
            kappa_up=T + params.U * np.diag(self.dens_down),
            kappa_down=T + params.U * np.diag(self.dens_up),
            e_shift=-params.U * float(np.sum(self.dens_up * self.dens_down)),
        )


def _thf_free_energy_fn(T, U, beta):
    from tfdmc._jax import jax, jnp

    def qr_q(y):
        q, r = jnp.linalg.qr(y)
        return q

    def densities(yd):
        q = qr_q(yd)
        return jnp.sum(q * q, axis=1)

    def free_energy(params):
        d_up = densities(params["y_d_up"])
        d_dn = densities(params["y_d_dn"])
        k_up = T + U * jnp.diag(d_dn)
        k_dn = T + U * jnp.diag(d_up)
        q_up = qr_q(params["y_phi_up"])
        q_dn = qr_q(params["y_phi_dn"])
        band = jnp.trace(q_up.T @ k_up @ q_up) + jnp.trace(q_dn.T @ k_dn @ q_dn)
        dc = -U * jnp.sum(d_up * d_dn)
        d = jnp.clip(jnp.concatenate([d_up, d_dn]), 1e-12, 1 - 1e-12)
        entropy = -jnp.sum(d * jnp.log(d) + (1 - d) * jnp.log(1 - d))
        return band + dc - entropy / beta, entropy

    value = lambda p: free_energy(p)[0]
    return free_energy, jax.jit(jax.value_and_grad(value))


def thermal_hartree_fock(
    spec: SectorSpec,
    params: ModelParams,
    beta: float,
    *,
    tol: float = 1e-8,
    max_iter: int = 5000,
    step0: float = 0.1,
    seed: int = 7,
) -> ThermalHFState:
    """Minimize the sitewise free-energy functional over orbital and density
    factors.

    Gradient descent with backtracking halving on (Y_phi, Y_d), the factors
    re-orthonormalized through their reduced QR after each accepted step.
    Particle numbers are enforced by the column counts, so no chemical
    potential search is needed.
    """
    if not spec.spinful:
        raise ValueError("thermal Hartree-Fock is defined for spinful sectors")
    if beta <= 0:
        raise ValueError("beta must be positive")
    from tfdmc._jax import jnp

    geom = spec.geom
    n = geom.n_sites
    T = jnp.asarray(hopping_matrix(geom, params.t))
    fe_full, vg = _thf_free_energy_fn(T, params.U, beta)

    rng = np.random.Generator(np.random.Philox(key=[seed, 0x7F]))
    eps0, vecs0 = np.linalg.eigh(hopping_matrix(geom, params.t))

    def init(n_col):
        y = vecs0[:, :n_col] + 0.01 * rng.standard_normal((n, n_col))
        return jnp.asarray(y)

    p = {
        "y_phi_up": init(spec.n_up),
        "y_phi_dn": init(spec.n_down),
        "y_d_up": init(spec.n_up),
        "y_d_dn": init(spec.n_down),
    }

    def reortho(p):
        return {k: jnp.linalg.qr(v)[0] for k, v in p.items()}

    p = reortho(p)
    f, g = vg(p)
    trace = [float(f)]
    step = step0
    converged = False
    gnorm = max(float(jnp.max(jnp.abs(v))) for v in g.values())
    prev_p = prev_g = None
    for _ in range(max_iter):
        gnorm = max(float(jnp.max(jnp.abs(v))) for v in g.values())
        if gnorm < tol:
            converged = True
            break
        gsq = sum(float(jnp.sum(v * v)) for v in g.values())
        if prev_p is not None:
            # Barzilai-Borwein trial step; backtracking below keeps descent
            sy = sum(float(jnp.sum((p[k] - prev_p[k]) * (g[k] - prev_g[k]))) for k in p)
            ss = sum(float(jnp.sum((p[k] - prev_p[k]) ** 2)) for k in p)
            if sy > 1e-300:
                step = min(max(ss / sy, 1e-6), 1e3)
        accepted = False
        noise = 1e-13 * max(1.0, abs(float(f)))  # line-search float allowance
        for _ in range(80):
            cand = reortho({k: p[k] - step * g[k] for k in p})
            f_new, g_new = vg(cand)
            if float(f_new) <= float(f) - 1e-4 * step * gsq + noise:
                prev_p, prev_g = p, g
                p, f, g = cand, f_new, g_new
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        trace.append(float(f))

    q_phi = {k: np.asarray(jnp.linalg.qr(p[k])[0]) for k in ("y_phi_up", "y_phi_dn")}
    q_d = {k: np.asarray(jnp.linalg.qr(p[k])[0]) for k in ("y_d_up", "y_d_dn")}
    d_up = np.sum(q_d["y_d_up"] ** 2, axis=1)
    d_dn = np.sum(q_d["y_d_dn"] ** 2, axis=1)
    _, entropy = fe_full(p)

    return ThermalHFState(
        y_phi={k: np.asarray(v) for k, v in p.items() if k.startswith("y_phi")},
        y_d={k: np.asarray(v) for k, v in p.items() if k.startswith("y_d")},
        q_phi=q_phi,
        q_d=q_d,
        dens_up=d_up,
        dens_down=d_dn,
        free_energy=float(f),
        entropy=float(entropy),
        converged=converged,
        grad_norm=gnorm,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# pair matrix file format: one JSON header line, then raw complex128 blocks

def save_pair_matrix(path, pm: PairMatrix, geom, extra: dict | None = None) -> None:
    header = {
        "format": "tfdmc-pairmatrix",
        "version": 1,
        "Lx": geom.Lx,
        "Ly": geom.Ly,
        "beta": pm.beta,
        "spinful": pm.phi_down is not None,
        "dtype": "complex128",
    }
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(pm.phi_up, dtype=np.complex128).tobytes())
        if pm.phi_down is not None:
            fh.write(np.ascontiguousarray(pm.phi_down, dtype=np.complex128).tobytes())


def load_pair_matrix(path) -> tuple[PairMatrix, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != "tfdmc-pairmatrix":
            raise ValueError(f"{path} is not a pair-matrix file")
        n = header["Lx"] * header["Ly"]
        raw = fh.read()
    block = n * n * 16
    phi_up = np.frombuffer(raw[:block], dtype=np.complex128).reshape(n, n).copy()
    phi_down = None
    if header["spinful"]:
        phi_down = np.frombuffer(raw[block : 2 * block], dtype=np.complex128).reshape(n, n).copy()
    return PairMatrix(beta=header["beta"], phi_up=phi_up, phi_down=phi_down), header
