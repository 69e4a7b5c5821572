"""Run configuration: JSON schema, defaults, validation, manifest hashing.

Defaults follow the production settings: 1024 chains and samples, base time
step 0.01, regularization decaying 1e-2 -> 1e-6 over 125 compression steps
(1500 for an initial reference fit), SPRING momentum 0.95, hidden dimension
24 with 6 heads and 2 layers.
"""

from __future__ import annotations

import copy
import hashlib
import json

import jsonschema

SCHEMA = {
    "type": "object",
    "required": ["lattice", "sector", "model", "reference", "target_beta", "seed", "output_dir"],
    "additionalProperties": False,
    "properties": {
        "lattice": {
            "type": "object",
            "required": ["Lx", "Ly"],
            "additionalProperties": False,
            "properties": {
                "Lx": {"type": "integer", "minimum": 1},
                "Ly": {"type": "integer", "minimum": 1},
            },
        },
        "sector": {
            "type": "object",
            "required": ["spinful", "n_up"],
            "additionalProperties": False,
            "properties": {
                "spinful": {"type": "boolean"},
                "n_up": {"type": "integer", "minimum": 0},
                "n_down": {"type": "integer", "minimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t": {"type": "number"},
                "U": {"type": "number"},
                "V": {"type": "number"},
            },
        },
        "reference": {
            "type": "object",
            "required": ["beta0"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["free", "thermal-hf"]},
                "beta0": {"type": "number", "minimum": 0},
            },
        },
        "target_beta": {"type": "number", "minimum": 0},
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "betas_checkpoint": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
            },
        },
        "ansatz": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tier": {"enum": ["meanfield", "jastrow", "bivit"]},
                "d_h": {"type": "integer", "minimum": 1},
                "n_heads": {"type": "integer", "minimum": 1},
                "n_layers": {"type": "integer", "minimum": 1},
                "symmetrize_swap": {"type": "boolean"},
                "init": {"enum": ["identity", "fit"]},
            },
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_chains": {"type": "integer", "minimum": 1},
                "n_samples": {"type": "integer", "minimum": 1},
                "kernel_mix": {
                    "type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3,
                },
                "alpha_u": {"type": "number", "exclusiveMinimum": 0},
                "burn_in_sweep_factor": {"type": "integer", "minimum": 0},
                "opt_pass_sweeps": {"type": "integer", "minimum": 1},
                "meas_pass_sweeps": {"type": "integer", "minimum": 1},
                "meas_passes": {"type": "integer", "minimum": 1},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_start": {"type": "number", "exclusiveMinimum": 0},
                "lambda_end": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "steps_per_compression": {"type": "integer", "minimum": 1},
                "initial_fit_steps": {"type": "integer", "minimum": 0},
            },
        },
        "evolution": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dtau_base": {"type": "number", "exclusiveMinimum": 0},
                "dtau_cap": {"type": "number", "exclusiveMinimum": 0},
                "i_c": {"type": "number", "exclusiveMinimum": 0},
                "adaptive": {"type": "boolean"},
                "fidelity_floor": {"type": "number", "minimum": 0, "maximum": 1},
                "f2_cadence": {"type": "integer", "minimum": 1},
                "grad_form": {"enum": ["centered", "cv_aware"]},
                "use_cv": {"type": "boolean"},
                "warm_start": {"type": "boolean"},
            },
        },
        "observables": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spin_correlations": {"type": "boolean"},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
    },
}

DEFAULTS = {
    "model": {"t": 1.0, "U": 0.0, "V": 0.0},
    "reference": {"kind": "free"},
    "sector": {"n_down": 0},
    "schedule": {"betas_checkpoint": []},
    "ansatz": {
        "tier": "bivit", "d_h": 24, "n_heads": 6, "n_layers": 2,
        "symmetrize_swap": False, "init": "identity",
    },
    "sampler": {
        "n_chains": 1024, "n_samples": 1024, "kernel_mix": [0.79, 0.20, 0.01],
        "alpha_u": 2.0, "burn_in_sweep_factor": 10, "opt_pass_sweeps": 2,
        "meas_pass_sweeps": 2, "meas_passes": 8,
    },
    "optimizer": {
        "lambda_start": 1e-2, "lambda_end": 1e-6, "momentum": 0.95,
        "learning_rate": 1.0, "steps_per_compression": 125, "initial_fit_steps": 1500,
    },
    "evolution": {
        "dtau_base": 0.01, "dtau_cap": 0.05, "i_c": 2.5e-3, "adaptive": True,
        "fidelity_floor": 0.95, "f2_cadence": 5, "grad_form": "centered",
        "use_cv": True, "warm_start": True,
    },
    "observables": {"spin_correlations": True},
}


class ConfigError(ValueError):
    pass


def resolve_config(raw: dict) -> dict:
    """Validate a raw config dict against the schema and fill defaults."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {path}: {exc.message}") from exc

    cfg = copy.deepcopy(raw)
    for key, block in DEFAULTS.items():
        section = cfg.setdefault(key, {})
        for k, v in block.items():
            section.setdefault(k, copy.deepcopy(v))

    sec = cfg["sector"]
    if not sec["spinful"] and sec.get("n_down", 0) != 0:
        raise ConfigError("config field sector/n_down: must be 0 for spinless runs")
    n_sites = cfg["lattice"]["Lx"] * cfg["lattice"]["Ly"]
    if sec["n_up"] > n_sites or sec.get("n_down", 0) > n_sites:
        raise ConfigError("config field sector: particle numbers exceed n_sites")
    if cfg["sampler"]["n_samples"] % cfg["sampler"]["n_chains"] != 0:
        raise ConfigError("config field sampler/n_samples: must be a multiple of n_chains")
    mix = cfg["sampler"]["kernel_mix"]
    if abs(sum(mix) - 1.0) > 1e-12 or min(mix) < 0:
        raise ConfigError("config field sampler/kernel_mix: must be nonnegative and sum to 1")
    for b in cfg["schedule"]["betas_checkpoint"]:
        if b < cfg["target_beta"] - 1e-12:
            raise ConfigError(
                "config field schedule/betas_checkpoint: checkpoints must not precede target_beta"
            )
    if cfg["reference"]["kind"] == "thermal-hf" and not sec["spinful"]:
        raise ConfigError("config field reference/kind: thermal-hf needs a spinful sector")
    tier = cfg["ansatz"]["tier"]
    if tier == "meanfield":
        if abs(cfg["target_beta"] - cfg["reference"]["beta0"]) > 1e-12 or cfg["schedule"]["betas_checkpoint"] not in ([], [cfg["target_beta"]]):
            raise ConfigError(
                "config field ansatz/tier: the mean-field tier has no parameters and "
                "only measures the reference state (target_beta must equal beta0)"
            )
    elif cfg["reference"]["beta0"] <= 0 or cfg["target_beta"] <= 0:
        raise ConfigError("config field reference/beta0: evolution runs need beta0 > 0")
    return cfg


def config_hash(cfg: dict) -> str:
    """Content hash of the resolved configuration (stable key order)."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return resolve_config(raw)
