"""Command line: ``rbsched run|validate|complexity|oracle``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import __version__
from .config import load_experiment, load_instance_config
from .errors import RbschedError
from .harness import emit_outputs, aggregate, predicted_complexity, realize, run_trials
from .model import validate_instance


def _overrides(spec, args):
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.trials is not None:
        kw["trials"] = args.trials
    if args.out is not None:
        kw["out"] = args.out
    if args.solver is not None:
        kw["solver"] = args.solver
    if args.scenario is not None:
        kw["scenario"] = args.scenario
    return dataclasses.replace(spec, **kw) if kw else spec


def cmd_run(args) -> int:
    spec = _overrides(load_experiment(args.spec), args)
    recs = run_trials(spec, workers=args.workers)
    rows = aggregate(recs, spec.sweep_variable)
    out = emit_outputs(rows, spec, records=recs)
    for r in rows:
        print(f"{spec.sweep_variable}={r.sweep_value:g} {r.scenario:4s} {r.solver:9s} "
              f"sum_rate={r.mean_sum_rate:.2f} P_e={r.outage_embb:.3f} P_m={r.outage_mmtc:.3f} "
              f"fail={r.failures}/{r.trials}")
    print(f"wrote {out}")
    return 0


def cmd_validate(args) -> int:
    bad = 0
    for path in args.config:
        try:
            spec = load_experiment(path)
            cfg = spec.instance
            values = spec.sweep_values
        except RbschedError:
            # not an experiment file: try it as a bare instance file
            cfg = load_instance_config(path)
            spec, values = None, None
        for sc in (spec.scenarios if spec else ["drbs", "srbs"]):
            pts = [cfg.with_sweep(spec.sweep_variable, v) for v in values] if spec else [cfg]
            for c in pts:
                for v in validate_instance(c.build(sc)):
                    print(f"{path}: {sc}: {v.rule} at {v.field} {v.detail}")
                    bad += 1
        if not bad:
            print(f"{path}: ok")
    return 1 if bad else 0


def cmd_complexity(args) -> int:
    cfg = load_instance_config(args.instance)
    rows = []
    for sc in (["drbs", "srbs"] if args.scenario in (None, "both") else [args.scenario]):
        inst = cfg.build(sc)
        rep = predicted_complexity(inst, sc, rho0=args.rho0, Psi=args.psi, pi=args.pi)
        rows.append(rep.as_dict())
    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    cols = ["scenario", "gamma1", "gamma2", "theta1", "theta2", "iter_power", "iter_assignment",
            "cost_power", "cost_assignment"]
    print(" ".join(f"{c:>15s}" for c in cols))
    for r in rows:
        print(" ".join(f"{r[c]:>15.4g}" if isinstance(r[c], float) else f"{r[c]:>15}" for c in cols))
    return 0


def cmd_oracle(args) -> int:
    import numpy as np
    from .asm import AsmConfig, run_asm
    from .errors import Infeasible
    from .monotonic import polyblock_solve
    from .oracle import brute_force
    cfg = load_instance_config(args.instance)
    sc = "drbs" if args.scenario in (None, "both") else args.scenario
    seed = 1 if args.seed is None else args.seed
    inst, real = realize(cfg, sc, seed)
    res = brute_force(inst, real, grid=args.grid)
    print(f"oracle   value={res.value:.6f} assignments={res.assignments}")
    if args.solver in ("monotonic", "both"):
        pb = polyblock_solve(inst, real, precheck=False)
        print(f"polyblock value={pb.value:.6f} iterations={pb.iterations} status={pb.status}")
    if args.solver in ("asm", "both"):
        try:
            st, tr = run_asm(inst, real, AsmConfig(precheck=False))
            from .rate import sum_rate
            print(f"asm      value={sum_rate(st, real, inst):.6f} outer={tr.outer_iterations}")
        except Infeasible as e:
            print(f"asm      infeasible: {e}")
    if args.dump and res.state is not None:
        np.savez(args.dump, p=res.state.p, s=res.state.s, g=real.g)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbsched", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--out")
        p.add_argument("--solver", choices=["asm", "monotonic", "both"])
        p.add_argument("--scenario", choices=["drbs", "srbs", "both"])

    p = sub.add_parser("run", help="run an experiment file")
    p.add_argument("spec")
    p.add_argument("--workers", type=int, default=1)
    common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("validate", help="check experiment or instance files")
    p.add_argument("config", nargs="+")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("complexity", help="constraint counts and iteration bounds")
    p.add_argument("instance")
    p.add_argument("--rho0", type=float, default=1.0)
    p.add_argument("--psi", type=float, default=1e-8)
    p.add_argument("--pi", type=float, default=10.0)
    p.add_argument("--json", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_complexity)

    p = sub.add_parser("oracle", help="brute-force a tiny single-BS instance")
    p.add_argument("instance")
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--dump", help="save the oracle allocation to this .npz")
    common(p)
    p.set_defaults(fn=cmd_oracle, solver=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (RbschedError, OSError, ValueError) as e:
        print(f"rbsched: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
