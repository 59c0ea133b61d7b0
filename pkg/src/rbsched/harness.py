"""Monte Carlo experiments, complexity prediction and output files.

Every trial t at every sweep point uses the realization seeded by
``trial_seed(seed, t)``, so scenarios, solvers and sweep points are compared on
common random numbers.  A trial whose solver raises is scored as the zero
allocation (sum-rate 0, every floor user in outage) and counted in
``failures``; the sweep carries on.

The rate-floor precheck is run and its verdict counted (``precheck_failures``),
but the solvers run with their own precheck disabled: the single-cell target
it tests is far stricter than what a multi-cell allocation needs.

metrics.csv columns, in order (``METRIC_COLUMNS``)::

    sweep_variable, sweep_value, scenario, solver, trials, failures,
    precheck_failures, mean_sum_rate, outage_embb, outage_mmtc, mean_outer,
    mean_power_iters, mean_assignment_iters, mean_power_ipm_iters,
    mean_assignment_ipm_iters

Wall-clock times go to timing.csv so that metrics.csv is byte-identical
across reruns of the same spec.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy
import yaml

from . import __version__
from .asm import AsmConfig, AsmTrace, run_asm
from .channel import ChannelRealization, sample_channel, sample_placement, trial_seed
from .config import ExperimentSpec, InstanceConfig
from .errors import AsymmetricInstance, ConfigError, Infeasible, IterLimit, RbschedError
from .model import NetworkInstance, Scenario, ServiceClass, validate_instance
from .monotonic import feasibility_check, polyblock_solve
from .rate import AllocationState, QosReport, outage_probabilities, qos_report

METRIC_COLUMNS = (
    "sweep_variable", "sweep_value", "scenario", "solver", "trials", "failures",
    "precheck_failures", "mean_sum_rate", "outage_embb", "outage_mmtc", "mean_outer",
    "mean_power_iters", "mean_assignment_iters", "mean_power_ipm_iters",
    "mean_assignment_ipm_iters",
)
TIMING_COLUMNS = ("sweep_value", "scenario", "solver", "wall_time")
_INT_COLUMNS = {"trials", "failures", "precheck_failures"}
_STR_COLUMNS = {"sweep_variable", "scenario", "solver"}


@dataclass(frozen=True)
class MetricsRow:
    sweep_variable: str
    sweep_value: float
    scenario: str
    solver: str
    trials: int
    failures: int
    precheck_failures: int
    mean_sum_rate: float
    outage_embb: float
    outage_mmtc: float
    mean_outer: float
    mean_power_iters: float          # GP solves in the power block
    mean_assignment_iters: float
    mean_power_ipm_iters: float      # interior-point iterations behind them
    mean_assignment_ipm_iters: float
    wall_time: float = 0.0           # seconds, summed over trials

    def as_csv_row(self) -> list[str]:
        return [v if isinstance(v, str) else repr(v) for v in
                (getattr(self, c) for c in METRIC_COLUMNS)]


@dataclass
class TrialRecord:
    sweep_value: float
    scenario: str
    solver: str
    trial: int
    seed: int
    status: str                      # "ok" | "infeasible" | "iterlimit" | "error"
    precheck: bool
    sum_rate: float
    report: QosReport
    outer: int = 0
    power_iters: int = 0
    assignment_iters: int = 0
    power_ipm_iters: int = 0
    assignment_ipm_iters: int = 0
    wall_time: float = 0.0
    trace: Optional[AsmTrace] = None
    log: list = field(default_factory=list)   # polyblock (iteration, vertices, ub, lb)
    message: str = ""

    @property
    def key(self):
        return (self.sweep_value, self.scenario, self.solver)


def realize(cfg: InstanceConfig, scenario: str, seed: int) -> tuple[NetworkInstance, ChannelRealization]:
    """Placed instance and channel draw for one trial."""
    inst = cfg.build(scenario)
    bad = validate_instance(inst)
    if bad:
        raise ConfigError("; ".join(f"{v.rule} at {v.field}" for v in bad))
    inst = sample_placement(inst, seed)
    return inst, sample_channel(inst, seed)


def _asm_config(spec: ExperimentSpec) -> AsmConfig:
    return AsmConfig(**{**spec.asm, "precheck": False})


def _one_trial(spec: ExperimentSpec, value: float, scenario: str, solver: str, trial: int) -> TrialRecord:
    seed = trial_seed(spec.seed, trial)
    inst, real = realize(spec.instance.with_sweep(spec.sweep_variable, value), scenario, seed)
    rule = spec.monotonic.get("target_rule", "single")
    pre = feasibility_check(inst, real, rule=rule).feasible
    zero = AllocationState.zeros(inst)
    t0 = time.perf_counter()
    rec = dict(status="ok", state=zero, message="")
    trace, log = None, []
    try:
        if solver == "asm":
            state, trace = run_asm(inst, real, _asm_config(spec))
        else:
            kw = {k: v for k, v in spec.monotonic.items()}
            res = polyblock_solve(inst, real, precheck=False, **kw)
            log = res.log
            state = AllocationState(res.p, (res.y > 1e-9).astype(float), False)
        rec["state"] = state
    except Infeasible as e:
        rec.update(status="infeasible", message=str(e))
    except IterLimit as e:
        rec.update(status="iterlimit", message=str(e))
    except (RbschedError, np.linalg.LinAlgError, FloatingPointError) as e:
        rec.update(status="error", message=f"{type(e).__name__}: {e}")
    wall = time.perf_counter() - t0
    rep = qos_report(rec["state"], real, inst)
    if rec["status"] == "ok" and not rep.feasible:
        rec.update(status="error", message="returned state violates " + ", ".join(rep.violations))
    if rec["status"] != "ok":
        rep = qos_report(zero, real, inst)
    out = TrialRecord(value, scenario, solver, trial, seed, rec["status"], pre,
                      rep.sum_rate, rep, wall_time=wall, trace=trace, log=log, message=rec["message"])
    if trace is not None:
        out.outer = trace.outer_iterations
        out.power_iters = trace.power_iterations
        out.assignment_iters = trace.assignment_iterations
        out.power_ipm_iters = trace.power_ipm_iterations
        out.assignment_ipm_iters = trace.assignment_ipm_iterations
    elif log:
        out.outer = len(log)
    return out


def _task(args):
    return _one_trial(*args)


def run_trials(spec: ExperimentSpec, workers: int = 1, trials: Optional[range] = None) -> list[TrialRecord]:
    """Every (sweep value, scenario, solver, trial) record, sorted by that key."""
    trials = range(spec.trials) if trials is None else trials
    tasks = [(spec, v, sc, so, t) for v in spec.sweep_values for sc in spec.scenarios
             for so in spec.solvers for t in trials]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            recs = list(pool.map(_task, tasks, chunksize=4))
    else:
        recs = [_task(t) for t in tasks]
    order = {(v, sc, so): i for i, (_, v, sc, so, _) in enumerate(tasks)}
    return sorted(recs, key=lambda r: (order[r.key], r.trial))


def aggregate(records: list[TrialRecord], sweep_variable: str) -> list[MetricsRow]:
    """One row per (sweep value, scenario, solver), in first-seen order."""
    groups: dict = {}
    for r in records:
        groups.setdefault(r.key, []).append(r)
    rows = []
    for (v, sc, so), rs in groups.items():
        rs = sorted(rs, key=lambda r: r.trial)
        pe, pm = outage_probabilities([r.report for r in rs])
        mean = lambda a: float(np.mean([getattr(r, a) for r in rs]))
        rows.append(MetricsRow(
            sweep_variable, float(v), sc, so, len(rs),
            sum(r.status != "ok" for r in rs), sum(not r.precheck for r in rs),
            mean("sum_rate"), pe, pm, mean("outer"), mean("power_iters"),
            mean("assignment_iters"), mean("power_ipm_iters"), mean("assignment_ipm_iters"),
            float(sum(r.wall_time for r in rs))))
    return rows


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> list[MetricsRow]:
    return aggregate(run_trials(spec, workers), spec.sweep_variable)


# ---- complexity -------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityReport:
    scenario: str
    gamma1: int              # constraints of the power subproblem
    gamma2: int              # constraints of the assignment subproblem
    theta1: int              # AGMA condensations, power subproblem
    theta2: int
    iter_power: float        # interior-point iteration bound log(Gamma / rho0 Psi) / log(pi)
    iter_assignment: float
    cost_power: float        # theta * iteration bound
    cost_assignment: float

    @property
    def iter_bound(self) -> float:
        return self.iter_power + self.iter_assignment

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["iter_bound"] = self.iter_bound
        return d


def class_counts(inst: NetworkInstance) -> tuple[int, int, int]:
    """(K^e, K^m, K^u) per BS; AsymmetricInstance if BSs differ."""
    counts = set()
    for b in range(inst.B):
        us = [u.service for u in inst.users if u.cell == b]
        counts.add(tuple(us.count(s) for s in (ServiceClass.EMBB, ServiceClass.MMTC, ServiceClass.URLLC)))
    if len(counts) != 1:
        raise AsymmetricInstance(f"per-BS class counts differ: {sorted(counts)}")
    return counts.pop()


def constraint_counts(B: int, F: int, N: int, Ke: int, Km: int, Ku: int, scenario: str):
    """(Gamma1, Gamma2, Theta1, Theta2) for a symmetric network."""
    K = Ke + Km + Ku
    g1 = B * Ke + B * Km + F * N * B * Ku + F * N * B * Km + B + F * N * B * K
    g2 = (4 * N * B * Ku + 1 + F * N * B * Ku + B * Km + B * Ke + F * N * B * Km
          + F * N * B + F * N * B * K)
    if scenario == "srbs":
        g2 -= 4 * N * B * Ku                     # no single-column constraint
    t1 = 3 * F * N * B * K
    t2 = F * N * B * B * K + 6 * F * N * B * K + F * N * B * K
    return g1, g2, t1, t2


def predicted_complexity(inst: NetworkInstance, scenario: Optional[str] = None, rho0: float = 1.0,
                         Psi: float = 1e-8, pi: float = 10.0) -> ComplexityReport:
    if scenario is None:
        scenario = "drbs" if inst.frame.scenario == Scenario.DYNAMIC else "srbs"
    if scenario not in ("drbs", "srbs"):
        raise ValueError(f"scenario must be drbs or srbs, got {scenario!r}")
    if not (rho0 > 0 and 0 < Psi < 1 and pi > 1):
        raise ValueError("need rho0 > 0, 0 < Psi < 1, pi > 1")
    Ke, Km, Ku = class_counts(inst)
    g1, g2, t1, t2 = constraint_counts(inst.B, inst.frame.F, inst.frame.N, Ke, Km, Ku, scenario)
    it = lambda g: float(np.log(g / (rho0 * Psi)) / np.log(pi))
    return ComplexityReport(scenario, g1, g2, t1, t2, it(g1), it(g2), t1 * it(g1), t2 * it(g2))


# ---- outputs ----------------------------------------------------------------------

def config_hash(spec: ExperimentSpec) -> str:
    blob = json.dumps(spec.as_dict(), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_metrics_csv(rows: list[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv_row())


def load_metrics_csv(path: str | Path) -> list[MetricsRow]:
    """Inverse of write_metrics_csv (wall_time is not stored there and reads back as 0)."""
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"unexpected columns {rd.fieldnames}")
        for row in rd:
            kw = {k: (v if k in _STR_COLUMNS else int(v) if k in _INT_COLUMNS else float(v))
                  for k, v in row.items()}
            out.append(MetricsRow(**kw))
    return out


def emit_outputs(rows: list[MetricsRow], spec: ExperimentSpec, out_dir: str | Path | None = None,
                 records: Optional[list[TrialRecord]] = None) -> Path:
    """Write metrics.csv, timing.csv, manifest.json and (given records) traces/ under out_dir."""
    if not rows:
        raise ConfigError("no metrics rows to write; the experiment produced nothing")
    out = Path(out_dir if out_dir is not None else spec.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / "metrics.csv")
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for r in rows:
            w.writerow([repr(r.sweep_value), r.scenario, r.solver, f"{r.wall_time:.3f}"])
    if records:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        with open(out / "trials.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sweep_value", "scenario", "solver", "trial", "seed", "status", "precheck",
                        "sum_rate", "outer", "power_iters", "assignment_iters", "power_ipm_iters",
                        "assignment_ipm_iters"])
            for r in records:
                w.writerow([repr(r.sweep_value), r.scenario, r.solver, r.trial, r.seed, r.status,
                            int(r.precheck), repr(r.sum_rate), r.outer, r.power_iters,
                            r.assignment_iters, r.power_ipm_iters, r.assignment_ipm_iters])
                stem = f"{r.scenario}_{r.solver}_v{r.sweep_value:g}_t{r.trial}"
                if r.trace is not None:
                    r.trace.to_csv(tdir / f"{stem}.csv")
                elif r.log:
                    with open(tdir / f"{stem}.csv", "w", newline="") as th:
                        tw = csv.writer(th, lineterminator="\n")
                        tw.writerow(["iteration", "vertices", "upper_bound", "lower_bound"])
                        tw.writerows(r.log)
    manifest = {
        "config_sha256": config_hash(spec),
        "seed": spec.seed,
        "trials": spec.trials,
        "config": spec.as_dict(),
        "versions": {"rbsched": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__, "pyyaml": yaml.__version__},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return out
