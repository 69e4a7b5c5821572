"""Variational log-amplitudes log Psi(x, y~) and their parameter gradients.

Three tiers share one evaluation interface:

* ``meanfield`` -- the bare pair determinant, no parameters (numpy path);
* ``jastrow``   -- pair determinant times intra/inter-copy Jastrow factors;
* ``bivit``     -- full neural backflow (see :mod:`tfdmc.bivit`).

``log_amp`` maps an (n, 4) uint64 configuration array to complex log Psi,
with real part -inf flagging exact zeros of the wavefunction (singular pair
determinants).  ``log_derivs`` additionally returns the exact gradient of
log Psi with respect to every real parameter, per configuration.
"""

from __future__ import annotations

import numpy as np

from tfdmc import fockspace as fk
from tfdmc.bivit import AnsatzConfig, build_network
from tfdmc.fockspace import AD, AU, PD, PU, DoubledConfig, SectorSpec
from tfdmc.meanfield import PairMatrix

__all__ = [
    "AnsatzConfig",
    "MeanFieldAmplitude",
    "NeuralAmplitude",
    "build_amplitude",
    "log_amp_meanfield",
]


class EvaluationError(RuntimeError):
    """Non-finite intermediate values that are not plain zeros of Psi."""


def _pad_size(n: int) -> int:
    size = 8
    while size < n:
        size *= 2
    return size


def sector_inputs(spec: SectorSpec, cfgs: np.ndarray):
    """Unpack configuration masks into per-copy network inputs."""
    n = spec.n_sites
    occ = {c: fk.occupations(cfgs[:, c], n) for c in (PU, PD, AU, AD)}
    cls_p = (occ[PU] + 2 * occ[PD]).astype(np.int32)
    cls_a = (occ[AU] + 2 * occ[AD]).astype(np.int32)
    if spec.spinful:
        nsp_p = np.stack([occ[PU], occ[PD]], axis=1).astype(np.float64)
        nsp_a = np.stack([occ[AU], occ[AD]], axis=1).astype(np.float64)
    else:
        nsp_p = occ[PU][:, None, :].astype(np.float64)
        nsp_a = occ[AU][:, None, :].astype(np.float64)

    rows = [fk.occupied_rows(cfgs[:, PU], n, spec.n_up)]
    cols = [fk.occupied_rows(cfgs[:, AU], n, spec.n_up)]
    if spec.spinful:
        rows.append(fk.occupied_rows(cfgs[:, PD], n, spec.n_down))
        cols.append(fk.occupied_rows(cfgs[:, AD], n, spec.n_down))
    return cls_p, cls_a, nsp_p, nsp_a, tuple(rows), tuple(cols)


def _phi_blocks(spec: SectorSpec, pm: PairMatrix):
    if pm.n_sites != spec.n_sites:
        raise ValueError("pair matrix size does not match the sector lattice")
    blocks = [np.asarray(pm.block(0), dtype=np.complex128)]
    if spec.spinful:
        blocks.append(np.asarray(pm.block(1), dtype=np.complex128))
    return tuple(blocks)


class MeanFieldAmplitude:
    """Pair-determinant amplitudes of the mean-field thermal state."""

    n_params = 0

    def __init__(self, spec: SectorSpec, pm: PairMatrix, symmetrize_swap: bool = False):
        self.spec = spec
        self.pm = pm
        self.symmetrize_swap = symmetrize_swap
        self._blocks = _phi_blocks(spec, pm)
        self.theta = np.zeros(0)

    def _logdet(self, cfgs: np.ndarray) -> np.ndarray:
        spec = self.spec
        out = np.zeros(cfgs.shape[0], dtype=np.complex128)
        pairs = [(PU, AU, spec.n_up)]
        if spec.spinful:
            pairs.append((PD, AD, spec.n_down))
        for s, (pc, ac, n_occ) in enumerate(pairs):
            if n_occ == 0:
                continue
            rows = fk.occupied_rows(cfgs[:, pc], spec.n_sites, n_occ)
            cols = fk.occupied_rows(cfgs[:, ac], spec.n_sites, n_occ)
            sub = self._blocks[s][rows[:, :, None], cols[:, None, :]]
            sign, logabs = np.linalg.slogdet(sub)
            with np.errstate(divide="ignore", invalid="ignore"):
                phase = np.where(sign == 0, 0.0, np.angle(sign))
            out += logabs + 1j * phase
        return out

    def log_amp(self, cfgs: np.ndarray) -> np.ndarray:
        cfgs = np.asarray(cfgs, dtype=np.uint64).reshape(-1, 4)
        la = self._logdet(cfgs)
        if self.symmetrize_swap:
            swapped = cfgs[:, [AU, AD, PU, PD]]
            lb = self._logdet(swapped)
            la = _log_mean_two(la, lb)
        return la

    def log_derivs(self, cfgs: np.ndarray):
        amps = self.log_amp(cfgs)
        return amps, np.zeros((len(amps), 0), dtype=np.complex128)

    def replace_theta(self, theta: np.ndarray) -> "MeanFieldAmplitude":
        if theta.size:
            raise ValueError("mean-field tier has no parameters")
        return self


def _log_mean_two(la: np.ndarray, lb: np.ndarray) -> np.ndarray:
    m = np.maximum(la.real, lb.real)
    both_zero = ~np.isfinite(m)
    m = np.where(both_zero, 0.0, m)
    with np.errstate(over="ignore"):
        s = np.exp(la - m) + np.exp(lb - m)
    out = m + np.log(s) - np.log(2.0)
    return np.where(both_zero, -np.inf + 0j, out)


class NeuralAmplitude:
    """Jastrow and bipartite-backflow tiers; parameters are one flat real
    vector, evaluated in float64 through jax."""

    def __init__(self, spec: SectorSpec, pm: PairMatrix, arch: AnsatzConfig, theta: np.ndarray | None = None):
        if arch.tier == "meanfield":
            raise ValueError("use MeanFieldAmplitude for the mean-field tier")
        self.spec = spec
        self.pm = pm
        self.arch = arch
        self.net = build_network(spec, arch)
        self._blocks = _phi_blocks(spec, pm)
        self.theta = self.net.theta0.copy() if theta is None else np.asarray(theta, dtype=np.float64)
        if self.theta.shape != (self.net.n_params,):
            raise ValueError(
                f"theta has {self.theta.size} entries, model expects {self.net.n_params}"
            )

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def replace_theta(self, theta: np.ndarray) -> "NeuralAmplitude":
        clone = object.__new__(NeuralAmplitude)
        clone.__dict__ = dict(self.__dict__)
        clone.theta = np.asarray(theta, dtype=np.float64)
        return clone

    def _padded_inputs(self, cfgs: np.ndarray):
        cfgs = np.asarray(cfgs, dtype=np.uint64).reshape(-1, 4)
        n = cfgs.shape[0]
        size = _pad_size(n)
        if size != n:
            cfgs = np.concatenate([cfgs, np.repeat(cfgs[:1], size - n, axis=0)], axis=0)
        return n, sector_inputs(self.spec, cfgs)

    def log_amp(self, cfgs: np.ndarray) -> np.ndarray:
        n, inputs = self._padded_inputs(cfgs)
        la = np.array(self.net.eval_batch(self.theta, self._blocks, *inputs))[:n]
        bad = np.isnan(la.real) | np.isnan(la.imag) | np.isposinf(la.real)
        if bad.any():
            raise EvaluationError(
                f"non-finite log-amplitude at {int(bad.sum())} configurations"
            )
        return la

    def log_derivs(self, cfgs: np.ndarray):
        n, inputs = self._padded_inputs(cfgs)
        amps, grads = self.net.grad_batch(self.theta, self._blocks, *inputs)
        amps = np.array(amps)[:n]
        grads = np.array(grads)[:n]
        if not np.all(np.isfinite(amps.real)):
            raise EvaluationError("gradient requested at a zero of the wavefunction")
        if not np.all(np.isfinite(grads.real)) or not np.all(np.isfinite(grads.imag)):
            raise EvaluationError("non-finite parameter gradient")
        return amps, grads


def build_amplitude(spec: SectorSpec, pm: PairMatrix, arch: AnsatzConfig):
    if arch.tier == "meanfield":
        return MeanFieldAmplitude(spec, pm, symmetrize_swap=arch.symmetrize_swap)
    return NeuralAmplitude(spec, pm, arch)


def log_amp_meanfield(pm: PairMatrix, spec: SectorSpec, cfg: DoubledConfig) -> complex:
    """Single-configuration mean-field log-amplitude (convenience wrapper)."""
    model = MeanFieldAmplitude(spec, pm)
    return complex(model.log_amp(cfg.to_array()[None, :])[0])
