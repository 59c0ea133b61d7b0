"""YAML instance and experiment files.

Instance file (every section optional; unknown keys are errors)::

    grid:     {T: 1.0e-3, W: 120.0e+3, chi: 0.25e-3, vartheta: 15.0e+3, tiling: mixed}
    network:  {B: 2, p_max_db: 40, noise_db: 0, path_loss_exponent: 3,
               area_side: 500, ref_distance: 100, dispersion: bandwidth}
    users:
      embb:  {per_cell: 1, rate_floor: 10}
      mmtc:  {per_cell: 1, rate_floor: 5, eps_max: 1.0e-3, payload_bits: 4}
      urllc: {per_cell: 1, eps_max: 1.0e-5, payload_bits: 4}

Rate floors are bits per frame; ``rate_floor_bps`` (bits per second) is
accepted instead and multiplied by T.  ``tiling`` is ``mixed`` (three
numerologies), ``unit`` (one block per cell) or a list of [f0, nf, n0, nn].

Experiment file::

    instance: desk.yaml           # path, relative to this file
    scenario: both                # drbs | srbs | both
    solver: asm                   # asm | monotonic | both
    sweep: {variable: Rmin_e, values: [100, 150, 200, 300]}
    trials: 100
    seed: 1
    out: results
    asm: {max_outer: 3, max_inner: 2}
    monotonic: {max_iter: 5000}
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError
from .model import (NetworkInstance, ServiceClass, StaticBlock, build_drbs_grid, build_srbs_grid,
                    make_instance, mixed_numerology_tiling, unit_tiling)

SCENARIOS = ("drbs", "srbs", "both")
SOLVERS = ("asm", "monotonic", "both")
SWEEP_VARIABLES = ("numRBs", "Rmin_e", "Rmin_m", "users")


def _num(x, where: str) -> float:
    # PyYAML reads 1e-3 (no dot) as a string
    try:
        return float(x)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a number, got {x!r}") from None


def _check_keys(d: Any, allowed: set, where: str) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    bad = set(d) - allowed
    if bad:
        raise ConfigError(f"{where}: unknown keys {sorted(bad)}")
    return d


@dataclass(frozen=True)
class ClassConfig:
    per_cell: int
    rate_floor: float = 0.0
    eps_max: float = 0.0
    payload_bits: float = 4.0


@dataclass(frozen=True)
class InstanceConfig:
    T: float = 1e-3
    W: float = 120e3
    chi: float = 0.25e-3
    vartheta: float = 15e3
    tiling: Any = "mixed"
    B: int = 2
    p_max_db: float = 40.0
    noise_db: float = 0.0
    path_loss_exponent: float = 3.0
    area_side: float = 500.0
    ref_distance: float = 100.0
    dispersion: str = "bandwidth"
    embb: ClassConfig = ClassConfig(1, rate_floor=10.0)
    mmtc: ClassConfig = ClassConfig(1, rate_floor=5.0, eps_max=1e-3)
    urllc: ClassConfig = ClassConfig(1, eps_max=1e-5)

    def frame(self, scenario: str):
        if scenario == "drbs":
            return build_drbs_grid(self.T, self.W, self.chi, self.vartheta)
        fr = build_drbs_grid(self.T, self.W, self.chi, self.vartheta)
        if self.tiling == "mixed":
            tiles = mixed_numerology_tiling(fr.F, fr.N)
        elif self.tiling == "unit":
            tiles = unit_tiling(fr.F, fr.N)
        else:
            tiles = tuple(StaticBlock(*map(int, t)) for t in self.tiling)
        return build_srbs_grid(self.T, self.W, self.chi, self.vartheta, tiles)

    def build(self, scenario: str) -> NetworkInstance:
        """Unplaced instance for ``drbs`` or ``srbs``."""
        inst = make_instance(self.frame(scenario), B=self.B,
                             per_class={"embb": self.embb.per_cell, "mmtc": self.mmtc.per_cell,
                                        "urllc": self.urllc.per_cell},
                             p_max_db=self.p_max_db, noise_db=self.noise_db,
                             path_loss_exponent=self.path_loss_exponent, area_side=self.area_side,
                             ref_distance=self.ref_distance, rate_floor_embb=self.embb.rate_floor,
                             rate_floor_mmtc=self.mmtc.rate_floor, eps_urllc=self.urllc.eps_max,
                             eps_mmtc=self.mmtc.eps_max, payload_bits=self.urllc.payload_bits,
                             dispersion=self.dispersion)
        if self.mmtc.payload_bits != self.urllc.payload_bits:
            users = [dataclasses.replace(u, payload_bits=self.mmtc.payload_bits)
                     if u.service == ServiceClass.MMTC else u for u in inst.users]
            inst = inst.with_users(users)
        return inst

    def with_sweep(self, variable: str, value: float) -> "InstanceConfig":
        """Config at one sweep point; numRBs sets the subband count F = value / N."""
        if variable == "Rmin_e":
            return dataclasses.replace(self, embb=dataclasses.replace(self.embb, rate_floor=float(value)))
        if variable == "Rmin_m":
            return dataclasses.replace(self, mmtc=dataclasses.replace(self.mmtc, rate_floor=float(value)))
        if variable == "users":
            k = int(value)
            return dataclasses.replace(self, embb=dataclasses.replace(self.embb, per_cell=k),
                                       mmtc=dataclasses.replace(self.mmtc, per_cell=k),
                                       urllc=dataclasses.replace(self.urllc, per_cell=k))
        if variable == "numRBs":
            N = round(self.T / self.chi)
            if int(value) % N:
                raise ConfigError(f"numRBs {value} is not a multiple of N={N}")
            return dataclasses.replace(self, W=self.vartheta * int(value) / N)
        raise ConfigError(f"unknown sweep variable {variable!r}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _class(d, name: str, default: ClassConfig, T: float) -> ClassConfig:
    d = _check_keys(d, {"per_cell", "rate_floor", "rate_floor_bps", "eps_max", "payload_bits"},
                    f"users.{name}")
    if "rate_floor" in d and "rate_floor_bps" in d:
        raise ConfigError(f"users.{name}: give rate_floor or rate_floor_bps, not both")
    out = default
    if "per_cell" in d:
        out = dataclasses.replace(out, per_cell=int(d["per_cell"]))
    if "rate_floor" in d:
        out = dataclasses.replace(out, rate_floor=_num(d["rate_floor"], f"users.{name}.rate_floor"))
    if "rate_floor_bps" in d:
        out = dataclasses.replace(out, rate_floor=_num(d["rate_floor_bps"], name) * T)
    for k in ("eps_max", "payload_bits"):
        if k in d:
            out = dataclasses.replace(out, **{k: _num(d[k], f"users.{name}.{k}")})
    return out


def parse_instance(d: dict) -> InstanceConfig:
    d = _check_keys(d, {"grid", "network", "users"}, "instance")
    base = InstanceConfig()
    g = _check_keys(d.get("grid"), {"T", "W", "chi", "vartheta", "tiling"}, "grid")
    n = _check_keys(d.get("network"), {"B", "p_max_db", "noise_db", "path_loss_exponent",
                                       "area_side", "ref_distance", "dispersion"}, "network")
    kw: dict = {}
    for k in ("T", "W", "chi", "vartheta"):
        if k in g:
            kw[k] = _num(g[k], f"grid.{k}")
    if "tiling" in g:
        t = g["tiling"]
        if isinstance(t, str) and t not in ("mixed", "unit"):
            raise ConfigError(f"grid.tiling: unknown tiling {t!r}")
        kw["tiling"] = t if isinstance(t, str) else tuple(tuple(int(v) for v in b) for b in t)
    for k in ("p_max_db", "noise_db", "path_loss_exponent", "area_side", "ref_distance"):
        if k in n:
            kw[k] = _num(n[k], f"network.{k}")
    if "B" in n:
        kw["B"] = int(n["B"])
    if "dispersion" in n:
        kw["dispersion"] = str(n["dispersion"])
    T = kw.get("T", base.T)
    u = _check_keys(d.get("users"), {"embb", "mmtc", "urllc"}, "users")
    for name in ("embb", "mmtc", "urllc"):
        if name in u:
            kw[name] = _class(u[name], name, getattr(base, name), T)
    return dataclasses.replace(base, **kw)


def load_instance_config(path: str | Path) -> InstanceConfig:
    with open(path) as fh:
        return parse_instance(yaml.safe_load(fh) or {})


@dataclass
class ExperimentSpec:
    instance: InstanceConfig
    scenario: str = "both"
    solver: str = "asm"
    sweep_variable: str = "Rmin_e"
    sweep_values: tuple = (10.0,)
    trials: int = 10
    seed: int = 1
    out: str = "results"
    asm: dict = field(default_factory=dict)
    monotonic: dict = field(default_factory=dict)
    instance_path: Optional[str] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}")
        if self.sweep_variable not in SWEEP_VARIABLES:
            raise ConfigError(f"sweep variable must be one of {SWEEP_VARIABLES}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        vals = [float(v) for v in self.sweep_values]
        if not vals or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError("sweep values must be non-empty and strictly increasing")
        self.sweep_values = tuple(vals)

    @property
    def scenarios(self) -> list[str]:
        return ["drbs", "srbs"] if self.scenario == "both" else [self.scenario]

    @property
    def solvers(self) -> list[str]:
        return ["asm", "monotonic"] if self.solver == "both" else [self.solver]

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sweep_values"] = list(self.sweep_values)
        d.pop("instance_path")
        return d


_ASM_KEYS = {"eps1", "eps2", "zeta2", "max_outer", "max_inner", "rounding"}
_MONO_KEYS = {"max_iter", "Pi", "delta", "target_rule"}


def load_experiment(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    d = _check_keys(d, {"instance", "scenario", "solver", "sweep", "trials", "seed", "out",
                        "asm", "monotonic"}, "experiment")
    inst_ref = d.get("instance")
    if isinstance(inst_ref, dict):
        inst, inst_path = parse_instance(inst_ref), None
    elif inst_ref is None:
        inst, inst_path = InstanceConfig(), None
    else:
        p = (path.parent / str(inst_ref)).resolve()
        inst, inst_path = load_instance_config(p), str(p)
    sw = _check_keys(d.get("sweep"), {"variable", "values"}, "sweep")
    return ExperimentSpec(
        instance=inst,
        scenario=str(d.get("scenario", "both")),
        solver=str(d.get("solver", "asm")),
        sweep_variable=str(sw.get("variable", "Rmin_e")),
        sweep_values=tuple(_num(v, "sweep.values") for v in sw.get("values", [10.0])),
        trials=int(d.get("trials", 10)),
        seed=int(d.get("seed", 1)),
        out=str(d.get("out", "results")),
        asm=dict(_check_keys(d.get("asm"), _ASM_KEYS, "asm")),
        monotonic=dict(_check_keys(d.get("monotonic"), _MONO_KEYS, "monotonic")),
        instance_path=inst_path,
    )
