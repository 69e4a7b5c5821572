"""Projected imaginary-time evolution with Taylor-root substeps.

Each time step of size dtau applies the second-order factorization

    exp(-dtau (H - E)) ~ (1 - z2 dtau (H - E)) (1 - z1 dtau (H - E)),
    z = (1 -+ i) / 2,

where each factor is realized by a fidelity compression of the variational
state onto the one-substep target.  The step size adapts to the local
energy variance through dtau = sqrt(I_c / Var(H)) (capped), checkpoints of
the last two accepted steps drive a velocity warm start of the parameters,
and the driver walks tau from 0 to beta/2 under the work operator and
optionally further under H (x) I, which advances the effective inverse
temperature by 2 dtau per unit of imaginary time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from tfdmc import estimators as est
from tfdmc.fockspace import SectorSpec
from tfdmc.hamiltonian import ModelParams, Operator, QuadraticHam, connected_rows, hamiltonian_operator, work_operator
from tfdmc.optimizer import OptimizerConfig, lambda_schedule, natural_step
from tfdmc.sampler import ChainPool, SampleBatch


@dataclass(frozen=True)
class TaylorRootScheme:
    """Roots of the truncated Taylor polynomial 1 - x + x^2/2."""

    order: int = 2
    roots: tuple = (0.5 + 0.5j, 0.5 - 0.5j)
    shift_energy: bool = True

    def coefficient_error(self) -> float:
        """Max deviation of prod_k (1 - z_k x) from 1 - x + x^2/2."""
        z1, z2 = self.roots
        coeffs = np.array([1.0, -(z1 + z2), z1 * z2])
        return float(np.max(np.abs(coeffs - np.array([1.0, -1.0, 0.5]))))


def adaptive_step_size(var_h: float, i_c: float, dtau_cap: float) -> float:
    """dtau = min(sqrt(I_c / Var(H)), cap); zero variance yields the cap."""
    if var_h < 0 or i_c <= 0 or dtau_cap <= 0:
        raise ValueError("need var_h >= 0, i_c > 0, dtau_cap > 0")
    if var_h == 0.0:
        return dtau_cap
    return min(float(np.sqrt(i_c / var_h)), dtau_cap)


def velocity_warm_start(
    prev: tuple[float, np.ndarray],
    cur: tuple[float, np.ndarray],
    dt2: float,
    max_ratio: float = 2.0,
    max_jump: float = 0.1,
) -> np.ndarray:
    """Linear extrapolation of the parameter trajectory over dt2.

    The difference between stochastic optimization solutions carries a
    random-walk component, so the extrapolation is doubly clamped: the
    factor dt2/dt1 at ``max_ratio`` and the displacement norm at
    ``max_jump``.
    """
    t1, th1 = prev
    t2, th2 = cur
    if dt2 < 0 or t2 <= t1:
        raise ValueError("checkpoints must be time-ordered with dt2 >= 0")
    disp = (th2 - th1) * min(dt2 / (t2 - t1), max_ratio)
    norm = float(np.linalg.norm(disp))
    if max_jump > 0 and norm > max_jump:
        disp = disp * (max_jump / norm)
    return th2 + disp


class SubstepTarget:
    """Evaluator of log[(V phi)(x)] for V = 1 - z dtau (Op - E_shift)."""

    def __init__(self, spec: SectorSpec, op: Operator, phi_eval, z: complex, dtau: float, e_shift: float):
        self.spec = spec
        self.op = op
        self.phi_eval = phi_eval
        self.z = complex(z)
        self.dtau = float(dtau)
        self.e_shift = float(e_shift)

    def log_v_phi(self, cfgs: np.ndarray) -> np.ndarray:
        cfgs = np.asarray(cfgs, dtype=np.uint64).reshape(-1, 4)
        flat, amps, offsets = connected_rows(self.spec, self.op, cfgs)
        la = self.phi_eval.log_amp(flat)
        coeff = (-self.z * self.dtau) * amps.astype(np.complex128)
        coeff[offsets[:-1]] += 1.0 + self.z * self.dtau * self.e_shift
        seg_max = np.maximum.reduceat(la.real, offsets[:-1])
        finite = np.isfinite(seg_max)
        seg_max = np.where(finite, seg_max, 0.0)
        scaled = coeff * np.exp(la - np.repeat(seg_max, np.diff(offsets)))
        sums = np.add.reduceat(scaled, offsets[:-1])
        with np.errstate(divide="ignore", invalid="ignore"):
            out = seg_max + np.log(sums)
        out = np.where(finite & (np.abs(sums) > 0), out, -np.inf + 0j)
        return out


@dataclass
class CompressionInfo:
    steps: int
    f_achieved: float
    f_stderr: float
    steps_to_target: int | None
    grad_norm: float
    warm_started: bool


@dataclass(frozen=True)
class EvolveSettings:
    dtau_base: float = 0.01
    dtau_cap: float = 0.05
    i_c: float = 2.5e-3
    adaptive: bool = True
    fidelity_floor: float = 0.95
    max_step_retries: int = 3
    f2_cadence: int = 5
    grad_form: str = "centered"
    use_cv: bool = True
    warm_start: bool = True
    compression_target_f: float = 0.999
    burn_in_sweep_factor: int = 10  # x n_sites sweeps at step boundaries
    opt_pass_sweeps: int = 2  # sweeps between optimization passes
    opt_passes: int = 1  # passes per optimization step (n_samples / n_chains)
    meas_pass_sweeps: int = 2  # sweeps between measurement passes
    meas_passes: int = 8
    initial_fit_steps: int = 0  # >0 fits the model to the reference first
    solver_mode: str = "auto"


@dataclass
class StepRecord:
    step: int
    tau: float
    beta_eff: float
    dtau: float
    energy: float
    stderr: float
    var_h: float
    fidelity: float
    ess: float
    acc_site: float
    acc_diag: float
    acc_swap: float


@dataclass
class EvolutionResult:
    trajectory: list[StepRecord]
    checkpoints: dict
    theta: np.ndarray
    aborted: bool = False
    abort_reason: str = ""
    compressions: list = field(default_factory=list)


def _acceptance_rates(batch: SampleBatch) -> tuple[float, float, float]:
    out = []
    for key in ("site_exchange", "diag_exchange", "swap"):
        p, a = batch.acceptance.get(key, (0, 0))
        out.append(a / p if p else 0.0)
    return tuple(out)


def compress(
    model,
    pool_psi: ChainPool,
    pool_phi: ChainPool,
    target: SubstepTarget,
    opt: OptimizerConfig,
    settings: EvolveSettings,
    *,
    n_steps: int | None = None,
    lambda_start: float | None = None,
    log_cb=None,
    warm_started: bool = False,
):
    """Maximize the fidelity of ``model`` against the substep target.

    Returns (model, CompressionInfo).  Both gradient forms produce the same
    natural-gradient update (constants vanish against the centered
    log-derivatives); the configured form is what gets logged.
    """
    n_steps = n_steps or opt.n_steps
    opt_eff = opt if lambda_start is None else replace(opt, lambda_start=lambda_start)
    prev_update = None
    moments = None
    steps_to_target = None
    report = None
    grad_norm = 0.0

    def gather(pool, evaluator):
        return SampleBatch.concatenate(
            [pool.run_pass(evaluator, settings.opt_pass_sweeps) for _ in range(settings.opt_passes)]
        )

    # re-equilibrate onto the entering state (it may have jumped since the
    # chains were last advanced, e.g. by a velocity warm start)
    pool_psi.refresh(model)
    pool_psi.run_sweeps(model, 4 * settings.opt_pass_sweeps)
    pool_phi.run_sweeps(target.phi_eval, 4 * settings.opt_pass_sweeps)

    for i in range(n_steps):
        lam = lambda_schedule(opt_eff, i, n_steps)
        if i % settings.f2_cadence == 0:
            batch_phi = gather(pool_phi, target.phi_eval)
            moments = est.target_moments(batch_phi, target.log_v_phi, model.log_amp)

        pool_psi.refresh(model)
        batch_psi = gather(pool_psi, model)
        if batch_psi.n_samples and est.effective_sample_size(batch_psi) < 0.3 * batch_psi.n_samples:
            pool_psi.run_sweeps(model, settings.opt_pass_sweeps)
            batch_psi = gather(pool_psi, model)

        amps, o_mat = model.log_derivs(batch_psi.cfgs)
        f1 = est.fidelity_values(batch_psi, target.log_v_phi)
        report = est.fidelity_report(batch_psi, f1, moments, use_cv=settings.use_cv)
        grad = est.fidelity_gradient(
            batch_psi, o_mat, f1, report.f2_mean, report.fidelity, form=settings.grad_form
        )
        grad_norm = float(np.linalg.norm(grad))

        w = batch_psi.weights()
        f1_mean = np.sum(w / w.sum() * f1)
        residual = (f1 - f1_mean) * report.f2_mean
        update = natural_step(
            o_mat, w, residual, lam,
            prev_update=prev_update, momentum=opt_eff.momentum, mode=settings.solver_mode,
            max_state_norm=opt_eff.max_state_norm, max_param_norm=opt_eff.max_param_norm,
        )
        prev_update = update
        model = model.replace_theta(model.theta + opt_eff.learning_rate * update)

        if steps_to_target is None and report.fidelity >= settings.compression_target_f:
            steps_to_target = i + 1
        if log_cb is not None:
            log_cb({
                "opt_step": i,
                "lambda": lam,
                "fidelity": report.fidelity,
                "f_cv": report.f_cv,
                "grad_norm": grad_norm,
                "ess": report.ess_psi,
                "grad_form": settings.grad_form,
            })

    # the achieved-fidelity report must not reuse stale target moments: the
    # state's overall norm drifts during optimization and F2 tracks it
    pool_psi.refresh(model)
    batch_psi = gather(pool_psi, model)
    batch_phi = gather(pool_phi, target.phi_eval)
    moments = est.target_moments(batch_phi, target.log_v_phi, model.log_amp)
    f1 = est.fidelity_values(batch_psi, target.log_v_phi)
    report = est.fidelity_report(batch_psi, f1, moments, use_cv=settings.use_cv)
    info = CompressionInfo(
        steps=n_steps,
        f_achieved=report.fidelity,
        f_stderr=report.stderr,
        steps_to_target=steps_to_target,
        grad_norm=grad_norm,
        warm_started=warm_started,
    )
    return model, info


def _measure(spec, op_energy, op_generator, model, pool, settings) -> tuple[float, float, float, float, SampleBatch]:
    """Energy (with stderr), generator mean and variance from fresh passes."""
    pool.refresh(model)
    batches = [pool.run_pass(model, settings.meas_pass_sweeps) for _ in range(settings.meas_passes)]
    batch = SampleBatch.concatenate(batches)
    energy, stderr = est.thermal_expectation(spec, op_energy, batch, model.log_amp)
    gen_mean, gen_var = est.local_variance(spec, op_generator, batch, model.log_amp)
    return energy, stderr, gen_mean, gen_var, batch


def evolve(
    spec: SectorSpec,
    params: ModelParams,
    quad_ref: QuadraticHam,
    beta0: float,
    beta: float,
    model,
    pool_psi: ChainPool,
    pool_phi: ChainPool,
    opt: OptimizerConfig,
    settings: EvolveSettings,
    *,
    betas_checkpoint: tuple[float, ...] = (),
    scheme: TaylorRootScheme | None = None,
    writer=None,
    observe_cb=None,
) -> EvolutionResult:
    """Drive the state from the mean-field reference to the target
    temperature, recording <H (x) I> along the path.

    The nominal inverse temperature is beta_eff = 2 tau: it reaches beta at
    the end of the work phase and is exact along the cooling segment.
    Checkpoints are taken exactly at the requested beta_eff values by
    clipping dtau.
    """
    scheme = scheme or TaylorRootScheme()
    geom = spec.geom
    op_work = work_operator(geom, params, quad_ref, beta0, beta)
    op_cool = hamiltonian_operator(geom, params)
    betas_checkpoint = tuple(sorted(b for b in betas_checkpoint))
    for b in betas_checkpoint:
        if b < beta - 1e-12:
            raise ValueError("checkpoints before the work-phase endpoint are not thermal states")
    tau_work = beta / 2.0
    tau_total = max([tau_work] + [b / 2.0 for b in betas_checkpoint])

    burn = settings.burn_in_sweep_factor * spec.n_sites
    pool_psi.refresh(model)
    pool_psi.run_sweeps(model, burn)
    pool_phi.set_masks(pool_psi.masks)
    pool_phi.refresh(model)

    result = EvolutionResult(trajectory=[], checkpoints={}, theta=model.theta.copy())
    log = writer.step_log if writer is not None else (lambda rec: None)

    if settings.initial_fit_steps > 0:
        # fit the network onto the reference state before evolving
        from tfdmc.ansatz import MeanFieldAmplitude

        ref_eval = MeanFieldAmplitude(spec, model.pm)
        target = SubstepTarget(spec, op_cool, ref_eval, 0.0, 0.0, 0.0)
        model, info = compress(
            model, pool_psi, pool_phi, target, opt, settings,
            n_steps=settings.initial_fit_steps, lambda_start=1e-1,
            log_cb=lambda rec: log({"phase": "initial_fit", **rec}),
        )
        result.compressions.append(("initial_fit", info))

    tau = 0.0
    step_idx = 0
    theta_history: list[tuple[float, np.ndarray]] = [(0.0, model.theta.copy())]
    pending = [b for b in betas_checkpoint]

    def make_record(fidelity: float, dtau: float, batch, energy, stderr, var_h) -> StepRecord:
        acc = _acceptance_rates(batch)
        return StepRecord(
            step=step_idx, tau=tau, beta_eff=2 * tau, dtau=dtau,
            energy=energy, stderr=stderr, var_h=var_h, fidelity=fidelity,
            ess=est.effective_sample_size(batch), acc_site=acc[0], acc_diag=acc[1], acc_swap=acc[2],
        )

    def emit(rec: StepRecord):
        result.trajectory.append(rec)
        if writer is not None:
            writer.trajectory_row(**rec.__dict__)

    def take_checkpoint(beta_eff, energy, stderr, batch):
        result.checkpoints[round(beta_eff, 10)] = {
            "tau": tau, "energy": energy, "stderr": stderr, "theta": model.theta.copy(),
        }
        if observe_cb is not None:
            observe_cb(beta_eff, batch, model)
        if writer is not None:
            writer.save_checkpoint(
                f"beta{beta_eff:g}",
                {"tau": tau, "beta_eff": beta_eff, "energy": energy, "stderr": stderr},
                {"theta": model.theta, "chain_masks": pool_psi.masks},
            )

    op_gen = op_work if tau_work > 1e-12 else op_cool
    energy, stderr, gen_mean, gen_var, batch = _measure(spec, op_cool, op_gen, model, pool_psi, settings)
    emit(make_record(1.0, 0.0, batch, energy, stderr, gen_var))
    if pending and abs(2 * tau - pending[0]) < 1e-9:
        take_checkpoint(pending.pop(0), energy, stderr, batch)

    while tau < tau_total - 1e-12:
        in_work = tau < tau_work - 1e-12
        op_gen = op_work if in_work else op_cool
        phase_end = tau_work if in_work else tau_total
        next_stop = phase_end
        if pending:
            next_stop = min(next_stop, pending[0] / 2.0)

        dtau_nominal = (
            adaptive_step_size(gen_var, settings.i_c, settings.dtau_cap)
            if settings.adaptive
            else settings.dtau_base
        )
        retries = 0
        while True:
            dtau = min(dtau_nominal, next_stop - tau)
            theta_start = model.theta.copy()
            warm = False
            if settings.warm_start and len(theta_history) >= 2:
                prev, cur = theta_history[-2], theta_history[-1]
                model = model.replace_theta(velocity_warm_start(prev, cur, dtau))
                warm = True

            ok = True
            phi_theta = theta_start  # each substep targets the state entering it
            for k, z in enumerate(scheme.roots):
                phi_eval = model.replace_theta(phi_theta)
                target = SubstepTarget(spec, op_gen, phi_eval, z, dtau, gen_mean)
                pool_phi.set_masks(pool_psi.masks)
                pool_phi.refresh(phi_eval)
                pool_phi.run_sweeps(phi_eval, settings.opt_pass_sweeps)
                model, info = compress(
                    model, pool_psi, pool_phi, target, opt, settings,
                    log_cb=lambda rec: log({"phase": "substep", "tau": tau, "root": k, **rec}),
                    warm_started=warm and k == 0,
                )
                result.compressions.append((f"tau{tau:.6f}_k{k}", info))
                phi_theta = model.theta.copy()
                if info.f_achieved < settings.fidelity_floor:
                    ok = False
                    break
            if ok:
                break
            retries += 1
            model = model.replace_theta(theta_start)
            pool_psi.refresh(model)
            pool_psi.run_sweeps(model, settings.burn_in_sweep_factor * spec.n_sites)
            if retries > settings.max_step_retries:
                result.aborted = True
                result.abort_reason = (
                    f"compression fidelity {info.f_achieved:.4f} below floor "
                    f"{settings.fidelity_floor} after {retries - 1} dtau halvings"
                )
                result.theta = model.theta.copy()
                if writer is not None:
                    writer.save_checkpoint(
                        "abort", {"tau": tau, "reason": result.abort_reason}, {"theta": model.theta}
                    )
                return result
            dtau_nominal = dtau_nominal / 2.0
            log({"phase": "retry", "tau": tau, "dtau": dtau_nominal, "fidelity": info.f_achieved})

        tau += dtau
        step_idx += 1
        theta_history.append((tau, model.theta.copy()))
        theta_history = theta_history[-2:]

        op_gen_next = op_work if tau < tau_work - 1e-12 else op_cool
        energy, stderr, gen_mean, gen_var, batch = _measure(
            spec, op_cool, op_gen_next, model, pool_psi, settings
        )
        last_f = min(info.f_achieved for _, info in result.compressions[-len(scheme.roots):])
        emit(make_record(last_f, dtau, batch, energy, stderr, gen_var))

        if pending and 2 * tau >= pending[0] - 1e-9:
            take_checkpoint(pending.pop(0), energy, stderr, batch)

    result.theta = model.theta.copy()
    return result
