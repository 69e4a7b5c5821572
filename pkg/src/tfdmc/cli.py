"""Command-line front end: evolve, meanfield, ed-reference, observe, validate.

Failures print a machine-readable error JSON to stderr and exit nonzero.
Serial execution is the default and guarantees bitwise-reproducible output
files for a fixed seed and configuration.
"""

from __future__ import annotations

import argparse
import json
import sys

from tfdmc.config import ConfigError, config_hash, load_config
from tfdmc.lattice import BOND_CONVENTION


def _fail(kind: str, message: str) -> int:
    print(json.dumps({"error": {"type": kind, "message": message}}), file=sys.stderr)
    return 1


def _print_header(cfg: dict):
    print(f"tfdmc run {config_hash(cfg)[:12]} seed={cfg['seed']}")
    print(f"convention: {BOND_CONVENTION}")


def cmd_evolve(args) -> int:
    from tfdmc.runner import RunAborted, run_evolve

    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail("config", str(exc))
    _print_header(cfg)
    try:
        result, trajectory = run_evolve(cfg)
    except RunAborted as exc:
        return _fail("aborted", str(exc))
    for beta, info in sorted(result.checkpoints.items()):
        print(f"beta_eff={beta:g}  energy={info['energy']:.6f} +- {info['stderr']:.6f}")
    print(f"trajectory: {trajectory}")
    return 0


def cmd_meanfield(args) -> int:
    from tfdmc.runner import run_meanfield_export

    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail("config", str(exc))
    _print_header(cfg)
    path = run_meanfield_export(cfg, args.out)
    print(f"pair matrix: {path}")
    return 0


def cmd_ed_reference(args) -> int:
    from tfdmc.runner import run_ed_reference

    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail("config", str(exc))
    betas = [float(b) for b in args.betas.split(",")]
    _print_header(cfg)
    try:
        path = run_ed_reference(cfg, betas, args.out)
    except ValueError as exc:
        return _fail("runtime", str(exc))
    print(f"exact reference: {path}")
    return 0


def cmd_observe(args) -> int:
    from tfdmc.runner import run_observe

    try:
        info = run_observe(args.checkpoint, args.out)
    except (OSError, KeyError, ValueError) as exc:
        return _fail("checkpoint", str(exc))
    print(
        f"beta_eff={info['beta_eff']:g}  energy={info['energy']:.6f} +- {info['stderr']:.6f}"
    )
    return 0


def cmd_validate(args) -> int:
    from tfdmc.selfcheck import run_all

    results = run_all()
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.detail}  [{r.seconds:.2f}s]")
    if all(r.passed for r in results):
        print("all checks passed")
        return 0
    return _fail("validate", "one or more oracle checks failed")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tfdmc",
        description="Thermal states of lattice fermions by variational Monte Carlo "
        "on a doubled Hilbert space.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run an imaginary-time evolution from a JSON config")
    p.add_argument("config")
    p.set_defaults(fn=cmd_evolve)

    p = sub.add_parser("meanfield", help="build and export the mean-field pair matrix")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_meanfield)

    p = sub.add_parser("ed-reference", help="exact thermal energies for small sectors")
    p.add_argument("config")
    p.add_argument("--betas", default="0.25,0.5,1,2")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ed_reference)

    p = sub.add_parser("observe", help="re-measure observables from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_observe)

    p = sub.add_parser("validate", help="run the embedded oracle suite")
    p.set_defaults(fn=cmd_validate)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
