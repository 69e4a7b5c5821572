"""Monte Carlo estimators over sample batches, with exact-sum twins.

Every reduction here consumes a :class:`~tfdmc.sampler.SampleBatch` whose
(unnormalized) log-weights define a self-normalized importance-sampling
estimate.  Feeding a batch that enumerates the whole sector with weights
|Psi|^2 turns each estimator into an exact sum, which is how the oracle
tests pin these formulas against dense linear algebra.

The fidelity of a trial state psi against a one-substep target V phi is
estimated in the asymmetric, variance-reduced form

    F = E_{x~|psi|^2}[f1] * F2 + F_CV,      f1 = (V phi)/psi,
    F_CV = -1/2 (E_{x~|psi|^2}[|f1|^2] * G2 - 1),

with F2 = E_{y~|V phi|^2}[psi/(V phi)] and G2 its second moment, both
importance-sampled from |phi|^2 with weights w(y) = |(V phi)(y)/phi(y)|^2.
Chain-level averaging (samples grouped by chain before the jackknife)
provides the variance estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tfdmc.fockspace import SectorSpec
from tfdmc.hamiltonian import Operator, connected_rows
from tfdmc.sampler import SampleBatch


def normalized_weights(batch: SampleBatch) -> np.ndarray:
    w = batch.weights()
    s = w.sum()
    if s <= 0:
        raise ValueError("batch has zero total weight")
    return w / s


def effective_sample_size(batch: SampleBatch) -> float:
    w = batch.weights()
    return float(w.sum() ** 2 / (w**2).sum())


def _chain_sums(values: np.ndarray, weights: np.ndarray, chain_ids: np.ndarray):
    """Per-chain (sum w*v, sum w) pairs for blocked jackknife."""
    ids = np.unique(chain_ids)
    num = np.zeros(ids.size, dtype=values.dtype)
    den = np.zeros(ids.size)
    for k, c in enumerate(ids):
        sel = chain_ids == c
        num[k] = np.sum(weights[sel] * values[sel])
        den[k] = np.sum(weights[sel])
    return num, den


def jackknife_ratio(num: np.ndarray, den: np.ndarray) -> tuple[complex, float]:
    """Self-normalized mean with delete-one-chain jackknife standard error."""
    total = num.sum() / den.sum()
    n = num.size
    if n < 2 or den.sum() == 0:
        return total, 0.0
    den_loo = den.sum() - den
    with np.errstate(divide="ignore", invalid="ignore"):
        loo = np.where(den_loo > 0, (num.sum() - num) / np.where(den_loo > 0, den_loo, 1.0), total)
    err = np.sqrt((n - 1) / n * np.sum(np.abs(loo - loo.mean()) ** 2))
    return total, float(err)


def weighted_mean(batch: SampleBatch, values: np.ndarray) -> tuple[complex, float]:
    num, den = _chain_sums(values, batch.weights(), batch.chain_ids)
    return jackknife_ratio(num, den)


# ---------------------------------------------------------------------------
# local estimators

def local_values(spec: SectorSpec, op: Operator, batch_cfgs: np.ndarray, log_amp_fn) -> np.ndarray:
    """O_loc(x) = sum_x' <x|Op|x'> Psi(x')/Psi(x) for each configuration.

    All operators here carry real amplitudes, so the connected rows
    <x'|Op|x> equal the required <x|Op|x'>.  Raises on zero-amplitude base
    configurations.
    """
    cfgs = np.asarray(batch_cfgs, dtype=np.uint64).reshape(-1, 4)
    flat, amps, offsets = connected_rows(spec, op, cfgs)
    la_flat = log_amp_fn(flat)
    la_base = log_amp_fn(cfgs)
    if not np.all(np.isfinite(la_base.real)):
        raise ValueError("local estimator evaluated at a zero of the wavefunction")
    base = np.repeat(la_base, np.diff(offsets))
    with np.errstate(over="ignore"):
        ratios = np.exp(la_flat - base)
    terms = amps * ratios
    return np.add.reduceat(terms, offsets[:-1])


def thermal_expectation(
    spec: SectorSpec, op: Operator, batch: SampleBatch, log_amp_fn
) -> tuple[float, float]:
    """Self-normalized weighted mean of O_loc with jackknife stderr."""
    if batch.n_samples == 0:
        raise ValueError("empty batch")
    oloc = local_values(spec, op, batch.cfgs, log_amp_fn)
    val, err = weighted_mean(batch, oloc)
    return float(np.real(val)), err


def local_variance(spec: SectorSpec, op: Operator, batch: SampleBatch, log_amp_fn) -> tuple[float, float]:
    """Weighted mean and variance of the local values of ``op``."""
    oloc = local_values(spec, op, batch.cfgs, log_amp_fn)
    w = normalized_weights(batch)
    mean = np.sum(w * oloc)
    var = float(np.sum(w * np.abs(oloc - mean) ** 2))
    return float(np.real(mean)), var


# ---------------------------------------------------------------------------
# enumeration-mode batches

def enum_batch(spec: SectorSpec, log_amp_fn, cap: int = 4000) -> SampleBatch:
    """Whole-sector batch with exact Born weights; estimator twins become
    exact sums when fed with it.  Exact zeros of Psi carry no weight and are
    dropped."""
    from tfdmc.fockspace import sector_array

    cfgs = sector_array(spec, cap=cap)
    la = log_amp_fn(cfgs)
    keep = np.isfinite(la.real)
    cfgs, la = cfgs[keep], la[keep]
    return SampleBatch(
        cfgs=cfgs,
        log_amps=la,
        log_weights=2.0 * la.real,
        chain_ids=np.arange(cfgs.shape[0]),
        alpha_u=2.0,
        acceptance={},
    )


# ---------------------------------------------------------------------------
# fidelity with control variates

@dataclass
class FidelityReport:
    fidelity: float  # control-variate adjusted
    raw_product: float  # E[f1] * F2
    f_cv: float
    f1_mean: complex
    f2_mean: complex
    g2_mean: float
    stderr: float
    ess_psi: float
    ess_phi: float
    ess_floor_hit: bool


@dataclass
class TargetMoments:
    """F2 and G2 with their phi-side jackknife blocks; reusable across steps
    (the recompute cadence knob lives in the compression loop)."""

    f2: complex
    g2: float
    f2_err: float
    g2_err: float
    ess_phi: float


def target_moments(batch_phi: SampleBatch, log_vphi_fn, psi_log_amp_fn) -> TargetMoments:
    """Estimate F2 = E_{y~|V phi|^2}[psi/(V phi)] and its second moment G2.

    ``log_vphi_fn`` maps configurations to log[(V phi)(y)]; reweighting by
    w(y) = |(V phi)(y)/phi(y)|^2 eliminates direct sampling from V phi.
    """
    log_vphi = log_vphi_fn(batch_phi.cfgs)
    log_psi = psi_log_amp_fn(batch_phi.cfgs)
    log_w_v = 2.0 * (log_vphi.real - batch_phi.log_amps.real)
    log_w = batch_phi.log_weights + log_w_v
    shift = log_w.max()
    w = np.exp(log_w - shift)
    # pair weights with the ratio psi/(V phi) in log space: near nodes of
    # V phi the weight vanishes while the bare ratio diverges
    log_f2 = np.where(np.isfinite(log_psi.real), log_psi - log_vphi, -np.inf + 0j)
    with np.errstate(over="ignore", invalid="ignore"):
        wf2 = np.exp(log_w - shift + log_f2)
        wg2 = np.exp(log_w - shift + 2.0 * log_f2.real)
    wf2 = np.where(np.isfinite(wf2), wf2, 0.0)
    wg2 = np.where(np.isfinite(wg2), wg2, 0.0)
    ids = np.unique(batch_phi.chain_ids)
    num2 = np.array([wf2[batch_phi.chain_ids == c].sum() for c in ids])
    num3 = np.array([wg2[batch_phi.chain_ids == c].sum() for c in ids])
    den = np.array([w[batch_phi.chain_ids == c].sum() for c in ids])
    f2_mean, f2_err = jackknife_ratio(num2, den)
    g2_mean, g2_err = jackknife_ratio(num3, den)
    ess = float(w.sum() ** 2 / (w**2).sum())
    return TargetMoments(
        f2=complex(f2_mean), g2=float(np.real(g2_mean)),
        f2_err=f2_err, g2_err=g2_err, ess_phi=ess,
    )


def fidelity_values(batch_psi: SampleBatch, log_vphi_fn) -> np.ndarray:
    """Per-sample f1(x) = (V phi)(x) / psi(x) over a psi-distributed batch."""
    log_vphi = log_vphi_fn(batch_psi.cfgs)
    return np.exp(log_vphi - batch_psi.log_amps)


def fidelity_report(
    batch_psi: SampleBatch,
    f1: np.ndarray,
    moments: TargetMoments,
    *,
    use_cv: bool = True,
    ess_floor_fraction: float = 0.3,
) -> FidelityReport:
    w = batch_psi.weights()
    num1, den1 = _chain_sums(f1, w, batch_psi.chain_ids)
    f1_mean, f1_err = jackknife_ratio(num1, den1)
    numg, deng = _chain_sums(np.abs(f1) ** 2, w, batch_psi.chain_ids)
    g1_mean, g1_err = jackknife_ratio(numg, deng)

    raw = float(np.real(f1_mean * moments.f2))
    f_cv = -0.5 * (float(np.real(g1_mean)) * moments.g2 - 1.0) if use_cv else 0.0
    fidelity = raw + f_cv

    # independent psi- and phi-side jackknives combined in quadrature
    with np.errstate(over="ignore"):
        var = float(
            np.float64(np.abs(moments.f2)) ** 2 * np.float64(f1_err) ** 2
            + np.float64(np.abs(f1_mean)) ** 2 * np.float64(moments.f2_err) ** 2
            + (0.5 * moments.g2 * g1_err) ** 2
            + (0.5 * float(np.real(g1_mean)) * moments.g2_err) ** 2
        )
    ess_psi = effective_sample_size(batch_psi)
    floor = ess_floor_fraction * batch_psi.n_samples
    return FidelityReport(
        fidelity=fidelity,
        raw_product=raw,
        f_cv=f_cv,
        f1_mean=complex(f1_mean),
        f2_mean=moments.f2,
        g2_mean=moments.g2,
        stderr=float(np.sqrt(var)),
        ess_psi=ess_psi,
        ess_phi=moments.ess_phi,
        ess_floor_hit=bool(min(ess_psi, moments.ess_phi) < floor),
    )


def fidelity_gradient(
    batch_psi: SampleBatch,
    o_mat: np.ndarray,
    f1: np.ndarray,
    f2: complex,
    fidelity: float,
    form: str = "centered",
) -> np.ndarray:
    """Gradient of F with respect to the real parameters of psi.

    ``centered``  : 2 Re E[dO_k^* (f1 - E[f1])] F2
    ``cv_aware``  : 2 Re E[O_k^* (f1 F2 - F)]

    Both use the same psi-distributed batch that produced ``o_mat`` and
    ``f1``; the factor 2 converts the holomorphic convention into the
    derivative with respect to real parameters.
    """
    w = normalized_weights(batch_psi)
    if form == "centered":
        f1_mean = np.sum(w * f1)
        do = centered_logderivs(o_mat, w)
        g = (do.conj().T @ (w * (f1 - f1_mean))) * f2
    elif form == "cv_aware":
        g = o_mat.conj().T @ (w * (f1 * f2 - fidelity))
    else:
        raise ValueError(f"unknown gradient form {form!r}")
    return 2.0 * np.real(g)


# ---------------------------------------------------------------------------
# quantum geometric tensor

def centered_logderivs(o_mat: np.ndarray, weights: np.ndarray) -> np.ndarray:
    w = weights / weights.sum()
    return o_mat - w @ o_mat


def qgt_dense(o_mat: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """S = E[dO^* dO^T] as a dense Hermitian PSD matrix."""
    w = weights / weights.sum()
    do = centered_logderivs(o_mat, weights)
    return do.conj().T @ (w[:, None] * do)


def qgt_apply(o_mat: np.ndarray, weights: np.ndarray, v: np.ndarray) -> np.ndarray:
    """S @ v without materializing S (sample-space contraction)."""
    w = weights / weights.sum()
    do = centered_logderivs(o_mat, weights)
    return do.conj().T @ (w * (do @ v))
