"""Turn a resolved configuration into runnable objects and drive runs.

Shared by the CLI subcommands and the test suite, so each run is
reproducible from its config and seed alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import tfdmc
from tfdmc import estimators as est
from tfdmc import io as tio
from tfdmc.ansatz import AnsatzConfig, build_amplitude
from tfdmc.config import config_hash
from tfdmc.evolution import EvolveSettings, EvolutionResult, evolve
from tfdmc.exactref import gibbs_energy
from tfdmc.fockspace import SectorSpec
from tfdmc.hamiltonian import ModelParams, hamiltonian_operator
from tfdmc.lattice import BOND_CONVENTION, build_lattice
from tfdmc.meanfield import (
    diagonalize,
    free_reference,
    pair_matrix,
    save_pair_matrix,
    thermal_hartree_fock,
)
from tfdmc.observables import export_cssr_rows, export_ssq_rows, spin_correlations
from tfdmc.optimizer import OptimizerConfig
from tfdmc.sampler import ChainPool, KernelMix, SampleBatch, UmbrellaSpec


class RunAborted(RuntimeError):
    pass


@dataclass
class Problem:
    cfg: dict
    geom: object
    spec: SectorSpec
    params: ModelParams
    quad_ref: object
    pm: object
    model: object
    opt: OptimizerConfig
    settings: EvolveSettings
    reference_info: dict


def build_problem(cfg: dict) -> Problem:
    geom = build_lattice(cfg["lattice"]["Lx"], cfg["lattice"]["Ly"])
    sec = cfg["sector"]
    spec = SectorSpec(geom, spinful=sec["spinful"], n_up=sec["n_up"], n_down=sec.get("n_down", 0))
    m = cfg["model"]
    params = ModelParams(t=m["t"], U=m["U"], V=m["V"])

    ref = cfg["reference"]
    reference_info = {"kind": ref["kind"], "beta0": ref["beta0"]}
    if ref["kind"] == "thermal-hf":
        thf = thermal_hartree_fock(spec, params, ref["beta0"], seed=cfg["seed"])
        quad = thf.quadratic(geom, params)
        reference_info.update(
            converged=thf.converged, free_energy=thf.free_energy, grad_norm=thf.grad_norm
        )
    else:
        quad = free_reference(geom, params, spec.spinful)
    pm = pair_matrix(diagonalize(quad), ref["beta0"])

    a = cfg["ansatz"]
    arch = AnsatzConfig(
        tier=a["tier"], d_h=a["d_h"], n_heads=a["n_heads"], n_layers=a["n_layers"],
        symmetrize_swap=a["symmetrize_swap"], seed=cfg["seed"],
    )
    model = build_amplitude(spec, pm, arch)

    o = cfg["optimizer"]
    opt = OptimizerConfig(
        lambda_start=o["lambda_start"], lambda_end=o["lambda_end"], momentum=o["momentum"],
        learning_rate=o["learning_rate"], n_steps=o["steps_per_compression"],
    )
    s = cfg["sampler"]
    e = cfg["evolution"]
    settings = EvolveSettings(
        dtau_base=e["dtau_base"], dtau_cap=e["dtau_cap"], i_c=e["i_c"], adaptive=e["adaptive"],
        fidelity_floor=e["fidelity_floor"], f2_cadence=e["f2_cadence"], grad_form=e["grad_form"],
        use_cv=e["use_cv"], warm_start=e["warm_start"],
        burn_in_sweep_factor=s["burn_in_sweep_factor"], opt_pass_sweeps=s["opt_pass_sweeps"],
        opt_passes=s["n_samples"] // s["n_chains"],
        meas_pass_sweeps=s["meas_pass_sweeps"], meas_passes=s["meas_passes"],
        initial_fit_steps=o["initial_fit_steps"] if a["init"] == "fit" else 0,
    )
    return Problem(
        cfg=cfg, geom=geom, spec=spec, params=params, quad_ref=quad, pm=pm, model=model,
        opt=opt, settings=settings, reference_info=reference_info,
    )


def make_pools(problem: Problem) -> tuple[ChainPool, ChainPool]:
    cfg = problem.cfg
    s = cfg["sampler"]
    mix = KernelMix(*s["kernel_mix"])
    umbrella = UmbrellaSpec(alpha_u=s["alpha_u"])
    psi = ChainPool(problem.spec, s["n_chains"], cfg["seed"], mix=mix, umbrella=umbrella, stream_offset=0)
    phi = ChainPool(problem.spec, s["n_chains"], cfg["seed"], mix=mix, umbrella=umbrella, stream_offset=s["n_chains"])
    return psi, phi


def manifest_for(cfg: dict, extra: dict | None = None) -> dict:
    man = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "package_version": tfdmc.__version__,
        "bond_convention": BOND_CONVENTION,
        "beta_eff_note": "beta_eff = 2*tau; nominal during the work phase, exact while cooling",
    }
    if extra:
        man.update(extra)
    return man


def _write_correlations(spec, geom, out_dir: Path, tag: str, batch: SampleBatch, hash_line: str):
    cm = spin_correlations(spec, batch, geom)
    tio.write_csv(
        out_dir / f"cssr_{tag}.csv", ("d_x", "d_y", "value", "err"),
        export_cssr_rows(cm), header_lines=[hash_line],
    )
    tio.write_csv(
        out_dir / f"ssq_{tag}.csv", ("q_x", "q_y", "value", "err"),
        export_ssq_rows(cm), header_lines=[hash_line],
    )
    return cm


def run_meanfield_measurement(problem: Problem, writer: tio.RunWriter) -> EvolutionResult:
    """Measurement-only run of the mean-field reference state (no
    evolution; the mean-field tier carries no parameters)."""
    cfg = problem.cfg
    spec = problem.spec
    settings = problem.settings
    pool, _ = make_pools(problem)
    model = problem.model
    pool.refresh(model)
    pool.run_sweeps(model, settings.burn_in_sweep_factor * spec.n_sites)
    batches = [pool.run_pass(model, settings.meas_pass_sweeps) for _ in range(settings.meas_passes)]
    batch = SampleBatch.concatenate(batches)
    op = hamiltonian_operator(problem.geom, problem.params)
    energy, stderr = est.thermal_expectation(spec, op, batch, model.log_amp)
    beta0 = cfg["reference"]["beta0"]
    writer.trajectory_row(
        step=0, tau=beta0 / 2, beta_eff=beta0, dtau=0.0, energy=energy, stderr=stderr,
        var_h=0.0, fidelity=1.0, ess=est.effective_sample_size(batch),
        acc_site=0.0, acc_diag=0.0, acc_swap=0.0,
    )
    writer.save_checkpoint(
        f"beta{beta0:g}",
        {"tau": beta0 / 2, "beta_eff": beta0, "energy": energy, "stderr": stderr},
        {"theta": np.zeros(0), "chain_masks": pool.masks},
    )
    result = EvolutionResult(trajectory=[], checkpoints={}, theta=np.zeros(0))
    result.checkpoints[round(beta0, 10)] = {
        "tau": beta0 / 2, "energy": energy, "stderr": stderr, "theta": np.zeros(0),
    }
    result.measurement_batch = batch  # type: ignore[attr-defined]
    return result


def run_evolve(cfg: dict, out_dir: str | Path | None = None) -> tuple[EvolutionResult, Path]:
    problem = build_problem(cfg)
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    man = manifest_for(cfg, {"reference": problem.reference_info})
    hash_line = f"manifest {man['config_hash']}"
    writer = tio.RunWriter(out, header_lines=[hash_line, BOND_CONVENTION], base_manifest=man)

    correl = cfg["observables"]["spin_correlations"] and problem.spec.spinful
    cms = {}

    def observe_cb(beta_eff, batch, model):
        if correl:
            cms[beta_eff] = _write_correlations(
                problem.spec, problem.geom, out, f"beta{beta_eff:g}", batch, hash_line
            )

    if cfg["ansatz"]["tier"] == "meanfield":
        result = run_meanfield_measurement(problem, writer)
        if correl:
            beta0 = cfg["reference"]["beta0"]
            cms[beta0] = _write_correlations(
                problem.spec, problem.geom, out, f"beta{beta0:g}",
                result.measurement_batch, hash_line,
            )
    else:
        pool_psi, pool_phi = make_pools(problem)
        result = evolve(
            problem.spec, problem.params, problem.quad_ref,
            cfg["reference"]["beta0"], cfg["target_beta"],
            problem.model, pool_psi, pool_phi, problem.opt, problem.settings,
            betas_checkpoint=tuple(cfg["schedule"]["betas_checkpoint"]),
            writer=writer, observe_cb=observe_cb,
        )

    trajectory_path = writer.finalize()
    with open(out / "manifest.json", "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
    if result.aborted:
        raise RunAborted(result.abort_reason)
    return result, trajectory_path


def run_ed_reference(cfg: dict, betas, out_path: str | Path) -> Path:
    problem = build_problem(cfg)
    ref = gibbs_energy(problem.spec, problem.params, betas)
    rows = [(float(b), float(e)) for b, e in zip(ref.betas, ref.values)]
    tio.write_csv(
        Path(out_path), ("beta", "energy"), rows,
        header_lines=[f"manifest {config_hash(cfg)}", BOND_CONVENTION],
    )
    return Path(out_path)


def run_meanfield_export(cfg: dict, out_path: str | Path) -> Path:
    problem = build_problem(cfg)
    save_pair_matrix(
        Path(out_path), problem.pm, problem.geom,
        extra={"reference": problem.reference_info, "config_hash": config_hash(cfg)},
    )
    return Path(out_path)


def run_observe(checkpoint_path: str | Path, out_dir: str | Path) -> dict:
    """Re-measure energy and correlations from a stored checkpoint."""
    man, arrays = tio.load_checkpoint(checkpoint_path)
    cfg = man["config"]
    problem = build_problem(cfg)
    if cfg["ansatz"]["tier"] == "meanfield":
        model = problem.model
    else:
        model = problem.model.replace_theta(arrays["theta"])
    spec = problem.spec
    settings = problem.settings
    s = cfg["sampler"]
    pool = ChainPool(
        spec, s["n_chains"], cfg["seed"],
        mix=KernelMix(*s["kernel_mix"]), umbrella=UmbrellaSpec(alpha_u=s["alpha_u"]),
        stream_offset=2 * s["n_chains"],
    )
    if "chain_masks" in arrays:
        pool.set_masks(arrays["chain_masks"])
        pool.refresh(model)
        pool.run_sweeps(model, settings.meas_pass_sweeps)
    else:
        pool.refresh(model)
        pool.run_sweeps(model, settings.burn_in_sweep_factor * spec.n_sites)
    batch = SampleBatch.concatenate(
        [pool.run_pass(model, settings.meas_pass_sweeps) for _ in range(settings.meas_passes)]
    )
    op = hamiltonian_operator(problem.geom, problem.params)
    energy, stderr = est.thermal_expectation(spec, op, batch, model.log_amp)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hash_line = f"manifest {config_hash(cfg)}"
    beta_eff = man.get("beta_eff", cfg["target_beta"])
    tio.write_csv(
        out / "observe.csv", ("beta_eff", "energy", "stderr"),
        [(beta_eff, energy, stderr)], header_lines=[hash_line],
    )
    if cfg["observables"]["spin_correlations"] and spec.spinful:
        _write_correlations(spec, problem.geom, out, f"beta{beta_eff:g}_observe", batch, hash_line)
    return {"beta_eff": beta_eff, "energy": energy, "stderr": stderr}
