"""Spin correlations, structure factors, and their infinite-temperature
closed forms.

The connected correlator is accumulated on the full grid of wrapped
displacements d = (dx mod Lx, dy mod Ly), where translation by d is a
bijection on sites; the Fourier transform to S(q) runs over that grid
exactly.  Reported real-space bins collapse displacements related by
reflection to their componentwise |minimal image| label, the same label the
distance embeddings use.

At infinite temperature the canonical ensemble (fixed particle numbers)
gives

    C_ss(0) = [p_up (1 - p_up) + p_dn (1 - p_dn)] / 4,
    C_ss(d != 0) = -C_ss(0) / (N - 1),      S(0) = 0,

while grand-canonical sampling gives C_ss(d != 0) = 0 and a flat S(q); the
two ensembles are distinguishable at beta -> 0 by exactly this tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tfdmc import fockspace as fk
from tfdmc.fockspace import PD, PU, SectorSpec
from tfdmc.lattice import LatticeGeom
from tfdmc.sampler import SampleBatch


@dataclass
class CorrelationMap:
    geom: LatticeGeom
    c_mod: np.ndarray  # (n_sites,) connected correlator per wrapped displacement
    c_mod_err: np.ndarray
    s_q: np.ndarray  # (n_sites,) structure factor on the momentum grid
    s_q_err: np.ndarray

    def mod_displacements(self) -> np.ndarray:
        g = self.geom
        return np.array([(d % g.Lx, d // g.Lx) for d in range(g.n_sites)], dtype=np.int64)

    def binned(self) -> list[tuple[int, int, float, float]]:
        """Rows (d_x, d_y, value, err) with displacements collapsed to their
        |minimal image| labels."""
        g = self.geom
        groups: dict[tuple[int, int], list[int]] = {}
        for d, (dx, dy) in enumerate(self.mod_displacements()):
            key = (min(dx, g.Lx - dx) if dx else 0, min(dy, g.Ly - dy) if dy else 0)
            groups.setdefault(key, []).append(d)
        rows = []
        for key in sorted(groups):
            members = groups[key]
            val = float(np.mean(self.c_mod[members]))
            err = float(np.sqrt(np.sum(self.c_mod_err[members] ** 2)) / len(members))
            rows.append((key[0], key[1], val, err))
        return rows

    def s_zero(self) -> float:
        return float(np.real(self.s_q[0]))


def _shift_table(geom: LatticeGeom) -> np.ndarray:
    """site_of[d, i] = i translated by the wrapped displacement d."""
    n = geom.n_sites
    table = np.empty((n, n), dtype=np.int64)
    for d in range(n):
        dx, dy = d % geom.Lx, d // geom.Lx
        for i in range(n):
            table[d, i] = geom.translate(i, dx, dy)
    return table


def _transform(geom: LatticeGeom, c_mod: np.ndarray) -> np.ndarray:
    disp = np.array([(d % geom.Lx, d // geom.Lx) for d in range(geom.n_sites)], dtype=float)
    phases = np.exp(1j * (geom.qgrid @ disp.T))  # (n_q, n_d)
    return phases @ c_mod


def spin_correlations(spec: SectorSpec, batch: SampleBatch, geom: LatticeGeom | None = None) -> CorrelationMap:
    """Connected S^z correlations of the physical copy, with chain-blocked
    jackknife errors.

    S_i^z = (n_up - n_dn)/2 is diagonal, so the estimator is a classical
    average of per-sample site products.
    """
    if not spec.spinful:
        raise ValueError("spin correlations require a spinful sector")
    geom = geom or spec.geom
    n = geom.n_sites
    shift = _shift_table(geom)

    s_z = 0.5 * (
        fk.occupations(batch.cfgs[:, PU], n).astype(np.float64)
        - fk.occupations(batch.cfgs[:, PD], n).astype(np.float64)
    )  # (n_samples, n_sites)
    w = batch.weights()
    ids = np.unique(batch.chain_ids)

    # per-chain accumulators: total weight, weighted site means, weighted
    # translation-averaged pair products
    W = np.zeros(ids.size)
    A = np.zeros((ids.size, n))
    B = np.zeros((ids.size, n))
    for k, c in enumerate(ids):
        sel = batch.chain_ids == c
        wk = w[sel]
        sk = s_z[sel]
        W[k] = wk.sum()
        A[k] = wk @ sk
        pair = np.einsum("mi,mdi->md", sk, sk[:, shift], optimize=True) / n
        B[k] = wk @ pair

    def assemble(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tot = W[mask].sum()
        mean_s = A[mask].sum(axis=0) / tot
        m2 = B[mask].sum(axis=0) / tot
        disconnect = np.array([np.mean(mean_s * mean_s[shift[d]]) for d in range(n)])
        c_mod = m2 - disconnect
        return c_mod, np.real(_transform(geom, c_mod))

    full_mask = np.ones(ids.size, dtype=bool)
    c_mod, s_q = assemble(full_mask)

    if ids.size >= 2:
        loo_c = np.empty((ids.size, n))
        loo_s = np.empty((ids.size, n))
        for k in range(ids.size):
            mask = full_mask.copy()
            mask[k] = False
            loo_c[k], loo_s[k] = assemble(mask)
        fac = (ids.size - 1) / ids.size
        c_err = np.sqrt(fac * np.sum((loo_c - loo_c.mean(axis=0)) ** 2, axis=0))
        s_err = np.sqrt(fac * np.sum((loo_s - loo_s.mean(axis=0)) ** 2, axis=0))
    else:
        c_err = np.zeros(n)
        s_err = np.zeros(n)

    return CorrelationMap(geom=geom, c_mod=c_mod, c_mod_err=c_err, s_q=_transform(geom, c_mod), s_q_err=s_err)


def infinite_temperature_oracle(spec: SectorSpec, ensemble: str = "canonical") -> CorrelationMap:
    """Closed-form beta -> 0 correlations for fixed or fluctuating particle
    numbers."""
    if not spec.spinful:
        raise ValueError("spin correlations require a spinful sector")
    geom = spec.geom
    n = geom.n_sites
    p_up = spec.n_up / n
    p_dn = spec.n_down / n
    c0 = 0.25 * (p_up * (1 - p_up) + p_dn * (1 - p_dn))
    c_mod = np.zeros(n)
    c_mod[0] = c0
    if ensemble == "canonical":
        c_mod[1:] = -c0 / (n - 1)
    elif ensemble != "grand":
        raise ValueError("ensemble must be 'canonical' or 'grand'")
    s_q = _transform(geom, c_mod)
    return CorrelationMap(geom=geom, c_mod=c_mod, c_mod_err=np.zeros(n), s_q=s_q, s_q_err=np.zeros(n))


def export_cssr_rows(cm: CorrelationMap) -> list[tuple[int, int, float, float]]:
    return cm.binned()


def export_ssq_rows(cm: CorrelationMap) -> list[tuple[float, float, float, float]]:
    rows = []
    for k in range(cm.geom.n_sites):
        qx, qy = cm.geom.qgrid[k]
        rows.append((float(qx), float(qy), float(np.real(cm.s_q[k])), float(cm.s_q_err[k])))
    return rows
