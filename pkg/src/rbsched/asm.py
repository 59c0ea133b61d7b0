"""Alternating power / assignment optimisation with AGMA-condensed geometric programs.

Each outer iteration runs two blocks.  The power block fixes the assignment
``s`` and repeatedly condenses the SINR denominators at the current powers,
solving a GP for new powers.  The assignment block fixes the powers, relaxes
``s`` to [floor, 1] and solves a GP built around the previous assignment.
Both GPs are inner approximations of the true relaxed problem that are tight
at the expansion point, so each accepted step cannot lower the relaxed
sum-rate.  Steps that would (solver inaccuracy, or the frozen per-link rates
in the assignment block) are shortened by backtracking or rejected.

After the loop the relaxed assignment is rounded and the powers are re-solved
on the binary assignment.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import convexcore as cc
from .channel import ChannelRealization
from .errors import Infeasible
from .model import NetworkInstance, Scenario, ServiceClass
from .rate import AllocationState, qos_report, user_sinr_thresholds

LN2 = np.log(2.0)


@dataclass(frozen=True)
class AsmConfig:
    eps1: float = 1e-5              # power-loop stopping gap (relative to the objective)
    eps2: float = 1e-5              # assignment-loop stopping gap
    zeta2: float = 1e5
    max_outer: int = 10
    max_inner: int = 10
    rounding: str = "half_max"      # "half_max" or "argmax"
    s_floor: float = 1e-6
    column_slack: float = 1e-3      # tau in alpha*beta <= alpha^2 + tau
    error_mode: str = "exact"       # "exact" SINR floor or "taylor" linearised SINR
    literal_gradient: bool = False  # extra 1/ln2 in d gamma / d p
    solver_tol: float = 1e-7
    precheck: bool = True
    init_share: float = 0.5         # relaxed weight of the designated user on each cell
    accept_tol: float = 1e-7        # relaxed-constraint tolerance for accepted steps
    max_backtrack: int = 6
    gp_margin: float = 1e-6         # log-space tightening of every GP inequality
    max_unit_drops: int = 4         # post-rounding retries that shed a weak error-constrained unit

    def __post_init__(self):
        if not (self.eps1 > 0 and self.eps2 > 0):
            raise ValueError("eps1 and eps2 must be positive")
        if self.zeta2 < 1:
            raise ValueError("zeta2 must be >= 1")
        if self.rounding not in ("half_max", "argmax"):
            raise ValueError(f"unknown rounding policy {self.rounding!r}")
        if self.error_mode not in ("exact", "taylor"):
            raise ValueError(f"unknown error mode {self.error_mode!r}")


@dataclass
class AsmTrace:
    rows: list[tuple[int, str, int, float, float]] = field(default_factory=list)
    power_iterations: int = 0          # GP solves (condensation rounds) in the power block
    assignment_iterations: int = 0
    power_ipm_iterations: int = 0      # interior-point iterations summed over those solves
    assignment_ipm_iterations: int = 0
    outer_iterations: int = 0
    termination: str = ""
    kkt_residuals: list[float] = field(default_factory=list)
    restoration_steps: int = 0

    def record(self, outer: int, stage: str, inner: int, objective: float, residual: float):
        self.rows.append((outer, stage, inner, float(objective), float(residual)))

    @property
    def objectives(self) -> np.ndarray:
        """Relaxed objective after every accepted step (starts at the first feasible iterate)."""
        return np.array([r[3] for r in self.rows if r[1] in ("start", "power", "assignment")])

    @property
    def total_iterations(self) -> int:
        return self.power_iterations + self.assignment_iterations

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "stage", "inner", "objective", "max_residual"])
            for i, r in enumerate(self.rows):
                w.writerow([i, r[1], r[2], repr(r[3]), repr(r[4])])


# ---- problem data in flattened form -------------------------------------------

class _Net:
    """Flattened (U, C) view of an instance and channel used by both blocks."""

    def __init__(self, inst: NetworkInstance, real: ChannelRealization):
        fr = inst.frame
        self.inst = inst
        self.U, self.B, self.C = inst.U, inst.B, fr.num_cells
        self.F, self.N = fr.F, fr.N
        self.ub = inst.user_bs
        g = real.flat()                                  # (B, U, C)
        self.g = g
        self.gd = g[self.ub, np.arange(self.U)]          # (U, C) direct gains
        # cross[u, j, c] = gain from user j's BS to user u, zero within the same BS
        self.cross = g[self.ub][:, :].transpose(1, 0, 2).copy()   # (U, U, C): g[b_j, u, c]
        same = self.ub[:, None] == self.ub[None, :]
        self.cross[same] = 0.0
        self.noise = inst.noise
        self.psi = fr.psi
        self.pmax = inst.p_max
        self.floors = inst.rate_floors
        self.gth = user_sinr_thresholds(inst)
        self.err_user = np.array([u.service != ServiceClass.EMBB for u in inst.users])
        self.urllc = np.array([u.service == ServiceClass.URLLC for u in inst.users])
        self.unit = fr.unit_of_cell()
        self.J = fr.num_units
        self.dynamic = fr.scenario == Scenario.DYNAMIC

    def shape3(self, x):
        return x.reshape(self.U, self.F, self.N)

    def interference(self, p, s):
        return np.einsum("ujc,jc->uc", self.cross, s * p)

    def sinr(self, p, s):
        return p * self.gd / (self.interference(p, s) + self.noise)

    def link_rates(self, p, s):
        return self.psi * np.log2(1.0 + self.sinr(p, s))

    def objective(self, p, s):
        return float((s * self.link_rates(p, s)).sum())

    def residual(self, p, s):
        """Largest normalised violation of the relaxed constraints (<= 0 when feasible)."""
        gam = self.sinr(p, s)
        rates = (s * self.psi * np.log2(1.0 + gam)).sum(axis=1)
        out = [-np.inf]
        fl = self.floors > 0
        if fl.any():
            out.append(((self.floors[fl] - rates[fl]) / np.maximum(self.floors[fl], 1.0)).max())
        used = np.zeros(self.B)
        np.add.at(used, self.ub, (s * p).sum(axis=1))
        out.append(((used - self.pmax) / self.pmax).max())
        excl = np.zeros((self.B, self.C))
        np.add.at(excl, self.ub, s)
        out.append((excl - 1.0).max())
        eu = self.err_user
        if eu.any():
            need = s[eu] * self.gth[eu, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(need > 0, need / np.maximum(gam[eu], 1e-300) - 1.0, -np.inf)
            out.append(r.max())
        return float(max(out))


# ---- SINR linearisation --------------------------------------------------------

@dataclass
class SinrLinearization:
    """First-order model of gamma[u, c] around (p0, s0).

    ``d_own[u, c]`` is d gamma / d p[u, c]; ``d_cross_p[u, j, c]`` and
    ``d_cross_s[u, j, c]`` are the derivatives with respect to the power and
    the assignment of an interfering user j on the same cell.
    """
    p0: np.ndarray
    s0: np.ndarray
    gamma0: np.ndarray
    d_own: np.ndarray
    d_cross_p: np.ndarray
    d_cross_s: np.ndarray

    def value(self, p, s=None) -> np.ndarray:
        s = self.s0 if s is None else s
        dp = p - self.p0
        ds = s - self.s0
        return (self.gamma0 + self.d_own * dp
                + np.einsum("ujc,jc->uc", self.d_cross_p, dp)
                + np.einsum("ujc,jc->uc", self.d_cross_s, ds))


def linearize_sinr(state_prev: AllocationState, real: ChannelRealization, inst: NetworkInstance,
                   literal_gradient: bool = False, floor: float = cc.VAR_FLOOR) -> SinrLinearization:
    """Taylor model of the SINR in (p, s); arrays use flattened cells c = f*N + n."""
    net = _Net(inst, real)
    U, C = net.U, net.C
    p0 = np.maximum(state_prev.p.reshape(U, C), floor)
    s0 = np.maximum(state_prev.s.reshape(U, C), floor)
    den = net.interference(p0, s0) + net.noise
    gam = p0 * net.gd / den
    d_own = net.gd / den
    if literal_gradient:
        d_own = d_own / LN2
    k = (gam / den)[:, None, :]
    d_cross_p = -k * net.cross * s0[None, :, :]
    d_cross_s = -k * net.cross * p0[None, :, :]
    return SinrLinearization(p0, s0, gam, d_own, d_cross_p, d_cross_s)


# ---- term-table helper ---------------------------------------------------------

class _Terms:
    """Accumulates posynomial terms row by row before handing them to GpProgram."""

    def __init__(self):
        self.logc: list[float] = []
        self.vars: list[list[int]] = []
        self.exps: list[list[float]] = []
        self.group: list[int] = []
        self.labels: list[str] = []

    def new(self, label: str) -> int:
        self.labels.append(label)
        return len(self.labels) - 1

    def add(self, grp: int, logc: float, vars_, exps):
        self.logc.append(float(logc))
        self.vars.append(list(vars_))
        self.exps.append(list(exps))
        self.group.append(grp)

    def flush(self, gp: cc.GpProgram):
        if not self.labels:
            return
        k = max(1, max(len(v) for v in self.vars))
        V = -np.ones((len(self.vars), k), dtype=int)
        E = np.zeros((len(self.vars), k))
        for i, (v, e) in enumerate(zip(self.vars, self.exps)):
            V[i, :len(v)] = v
            E[i, :len(e)] = e
        gp.add_posynomials(self.logc, V, E, self.group, self.labels)


# ---- power block ---------------------------------------------------------------

@dataclass
class PowerGp:
    gp: cc.GpProgram
    pairs: np.ndarray          # (A, 2) active (user, cell)
    p_index: np.ndarray        # (A,) GP variable of each pair's power
    t_index: np.ndarray


def build_power_gp(s_fixed: np.ndarray, p_prev: np.ndarray, real: ChannelRealization,
                   inst: NetworkInstance, cfg: AsmConfig = AsmConfig(), _net=None) -> PowerGp:
    """GP in (p, t) over the links with s > 0: minimise prod t^(s psi/ln2).

    t[a] upper-bounds 1/(1+gamma[a]) through the condensed denominator, so the
    objective is 2^(-relaxed sum-rate) evaluated on the surrogate.
    """
    net = _net or _Net(inst, real)
    U, C = net.U, net.C
    s = s_fixed.reshape(U, C)
    p0 = p_prev.reshape(U, C)
    pairs = np.argwhere(s > 0)
    A = len(pairs)
    if A == 0:
        raise Infeasible("no active links")
    pmax_u = net.pmax[net.ub]
    p_lo = np.maximum(pmax_u * 1e-12, cc.VAR_FLOOR)
    p0 = np.clip(p0, p_lo[:, None], pmax_u[:, None])
    gp = cc.GpProgram()
    pid = -np.ones((U, C), dtype=int)
    pv = gp.add_variables("p", A, p_lo[pairs[:, 0]], pmax_u[pairs[:, 0]], block=pairs[:, 1])
    gd = net.gd[pairs[:, 0], pairs[:, 1]]
    t_lo = 0.5 / (1.0 + pmax_u[pairs[:, 0]] * gd / net.noise)
    tv = gp.add_variables("t", A, t_lo, 1.0, block=pairs[:, 1])
    pid[pairs[:, 0], pairs[:, 1]] = pv
    sa = s[pairs[:, 0], pairs[:, 1]]
    gp.set_objective(0.0, tv, sa * net.psi / LN2)

    tm = _Terms()
    lin = None
    if cfg.error_mode == "taylor":
        lin = linearize_sinr(AllocationState(net.shape3(p0), net.shape3(s)), real, inst,
                             cfg.literal_gradient)
    for a, (u, c) in enumerate(pairs):
        js = np.nonzero((net.cross[u, :, c] > 0) & (s[:, c] > 0))[0]
        coefs = s[js, c] * net.cross[u, js, c]          # interference coefficients on p_j
        vals = np.concatenate([[net.noise], coefs * p0[js, c], [gd[a] * p0[u, c]]])
        mu = vals / vals.sum()
        if (mu <= 0).any():
            mu = np.maximum(mu, 1e-300)
            mu /= mu.sum()
        # condensed denominator prod (term/mu)^mu
        L = mu[0] * np.log(net.noise / mu[0]) + np.dot(mu[1:-1], np.log(coefs / mu[1:-1])) \
            + mu[-1] * np.log(gd[a] / mu[-1])
        dvars = [pv[a]] + list(pid[js, c]) + [tv[a]]
        dexps = [-mu[-1]] + list(-mu[1:-1]) + [-1.0]
        grp = tm.new(f"sinr u{u} c{c}")
        tm.add(grp, np.log(net.noise) - L, dvars, dexps)
        for i, j in enumerate(js):
            e = list(dexps)
            e[1 + i] += 1.0
            tm.add(grp, np.log(coefs[i]) - L, dvars, e)
        if net.err_user[u] and net.gth[u] > 0:
            grp = tm.new(f"error u{u} c{c}")
            k0 = s[u, c] * net.gth[u]
            if lin is None:
                tm.add(grp, np.log(k0 * net.noise / gd[a]), [pv[a]], [-1.0])
                for i, j in enumerate(js):
                    tm.add(grp, np.log(k0 * coefs[i] / gd[a]), [pv[a], pid[j, c]], [-1.0, 1.0])
            else:
                own = lin.d_own[u, c]
                dc = -lin.d_cross_p[u, js, c]
                c0 = float(np.dot(dc, lin.p0[js, c]))
                if k0 - c0 > 0:
                    tm.add(grp, np.log((k0 - c0) / own), [pv[a]], [-1.0])
                for i, j in enumerate(js):
                    if dc[i] > 0:
                        tm.add(grp, np.log(dc[i] / own), [pv[a], pid[j, c]], [-1.0, 1.0])
                if grp not in tm.group:
                    tm.labels.pop()
    # rate floors: prod t^s <= 2^(-Rmin/psi)
    for u in np.nonzero(net.floors > 0)[0]:
        mine = np.nonzero(pairs[:, 0] == u)[0]
        if len(mine) == 0:
            raise Infeasible(f"user {u} has a rate floor but no links")
        grp = tm.new(f"floor u{u}")
        tm.add(grp, net.floors[u] / net.psi * LN2, tv[mine], sa[mine])
    # per-BS budgets
    for b in range(net.B):
        mine = np.nonzero(net.ub[pairs[:, 0]] == b)[0]
        if len(mine) == 0:
            continue
        grp = tm.new(f"budget b{b}")
        for a in mine:
            tm.add(grp, np.log(sa[a] / net.pmax[b]), [pv[a]], [1.0])
    tm.flush(gp)
    return PowerGp(gp, pairs, pv, tv)


def _power_point(pg: PowerGp, p_prev: np.ndarray, s: np.ndarray, net: _Net) -> np.ndarray:
    """Start point u = log x for the power GP at the previous powers."""
    U, C = net.U, net.C
    lo = np.log(np.asarray(pg.gp.lower))
    hi = np.log(np.asarray(pg.gp.upper))
    p0 = p_prev.reshape(U, C)[pg.pairs[:, 0], pg.pairs[:, 1]]
    gam = net.sinr(p_prev.reshape(U, C), s)[pg.pairs[:, 0], pg.pairs[:, 1]]
    x = np.concatenate([np.log(np.maximum(p0, 1e-300)), -np.log1p(gam) + 1e-4])
    return np.clip(x, lo + 1e-9, hi - 1e-9)


def solve_power_subproblem(s_fixed, p_init, real, inst, cfg: AsmConfig = AsmConfig(),
                           trace: Optional[AsmTrace] = None, outer: int = 0, _net=None):
    """Condense-and-solve loop over powers with ``s`` fixed.

    Returns (p, converged).  Raises Infeasible when the first GP has no
    feasible point.  Each accepted iterate does not lower the relaxed
    objective; a GP solution that would is discarded and the loop ends.
    """
    net = _net or _Net(inst, real)
    U, C = net.U, net.C
    s = s_fixed.reshape(U, C)
    p = np.where(s > 0, p_init.reshape(U, C), 0.0)
    J = net.objective(p, s)
    feasible = net.residual(p, s) <= cfg.accept_tol
    for it in range(cfg.max_inner):
        pg = build_power_gp(s, p, real, inst, cfg, _net=net)
        cp = cc.gp_to_convex(pg.gp)
        u0 = _power_point(pg, p, s, net)
        tol = cfg.solver_tol * max(1.0, J) * LN2 / net.psi
        sol = cc.solve_convex(cp, tol=tol, u0=u0, margin=cfg.gp_margin)
        if trace is not None:
            trace.power_iterations += 1
            trace.power_ipm_iterations += sol.iterations
            trace.kkt_residuals.append(sol.kkt_residual)
        if sol.status == "Infeasible":
            if not feasible:
                raise Infeasible("power subproblem has no feasible point")
            break
        x = sol.x
        p_new = np.zeros((U, C))
        p_new[pg.pairs[:, 0], pg.pairs[:, 1]] = x[pg.p_index]
        J_new = net.objective(p_new, s)
        res = net.residual(p_new, s)
        if res > cfg.accept_tol:
            if feasible:
                break
            raise Infeasible("power subproblem returned an infeasible point")
        if feasible and J_new < J:
            break
        gap = J_new - J
        p, J = p_new, J_new
        if trace is not None:
            trace.record(outer, "power" if feasible else "restore", it, J, res)
        was_feasible, feasible = feasible, True
        if was_feasible and gap <= cfg.eps1 * max(1.0, abs(J)):
            return p, True
    return p, False


# ---- assignment block ----------------------------------------------------------

@dataclass
class AssignGp:
    gp: cc.GpProgram
    x_index: np.ndarray        # (U, J) variable of each (user, unit)
    zeta_index: int
    zeta2: float
    start: dict = field(default_factory=dict)   # variable -> log value of a consistent start


def build_assignment_gp(p_fixed: np.ndarray, s_prev: np.ndarray, real: ChannelRealization,
                        inst: NetworkInstance, cfg: AsmConfig = AsmConfig(), _net=None) -> AssignGp:
    """GP over relaxed unit assignments x[u, j] in [s_floor, 1] with the powers fixed.

    Per-link rates are evaluated at ``s_prev`` and held fixed; the sum-rate
    objective enters through the epigraph variable zeta1 and a condensed
    zeta2 <= zeta1 + sum x R constraint.  Rate floors are condensed per user,
    URLLC users get the single-column constraints in the dynamic frame.
    """
    net = _net or _Net(inst, real)
    U, C, J = net.U, net.C, net.J
    p = p_fixed.reshape(U, C)
    unit = net.unit
    sp_ = np.maximum(s_prev.reshape(U, C), cfg.s_floor)
    # unit-level previous assignment (cells of a unit share one value)
    x0 = np.zeros((U, J))
    np.maximum.at(x0, (slice(None), unit), sp_)
    x0 = np.clip(x0, cfg.s_floor, 1.0)
    s_cells = x0[:, unit]
    Rc = net.link_rates(p, s_cells)
    Rbar = np.zeros((U, J))
    np.add.at(Rbar.T, unit, Rc.T)
    Rbar = np.maximum(Rbar, 1e-12 * net.psi)

    gp = cc.GpProgram()
    xv = gp.add_variables("x", U * J, cfg.s_floor, 1.0, block=np.tile(np.arange(J), U)).reshape(U, J)
    total = float((x0 * Rbar).sum())
    zeta2 = cfg.zeta2 if cfg.zeta2 > total * 1.001 else 10.0 * total
    z0 = zeta2 - total
    zv = gp.add_variable("zeta1", z0 * 1e-9, zeta2)
    gp.set_objective(0.0, [zv], [z0])
    start = {zv: np.log(z0 * 1.01)}
    tm = _Terms()
    # zeta2 (zeta1/d0)^-d0 prod (x R / d)^-d <= 1
    d0 = z0 / zeta2
    d = (x0 * Rbar / zeta2).ravel()
    logc = np.log(zeta2) + d0 * np.log(d0) - np.dot(d, np.log(Rbar.ravel() / d))
    grp = tm.new("objective")
    tm.add(grp, logc, [zv] + list(xv.ravel()), [-d0] + list(-d))
    # rate floors
    for u in np.nonzero(net.floors > 0)[0]:
        w = x0[u] * Rbar[u]
        phi = w / w.sum()
        grp = tm.new(f"floor u{u}")
        tm.add(grp, np.log(net.floors[u]) - np.dot(phi, np.log(Rbar[u] / phi)), xv[u], -phi)
    # exclusivity per (b, unit)
    for b in range(net.B):
        mine = np.nonzero(net.ub == b)[0]
        for j in range(J):
            grp = tm.new(f"exclusive b{b} j{j}")
            for u in mine:
                tm.add(grp, 0.0, [xv[u, j]], [1.0])
    # budgets: sum_j x[u, j] * sum_{c in j} p[u, c] <= Pmax
    pj = np.zeros((U, J))
    np.add.at(pj.T, unit, p.T)
    for b in range(net.B):
        grp = tm.new(f"budget b{b}")
        for u in np.nonzero(net.ub == b)[0]:
            for j in range(J):
                if pj[u, j] > 0:
                    tm.add(grp, np.log(pj[u, j] / net.pmax[b]), [xv[u, j]], [1.0])
        if grp not in tm.group:
            tm.labels.pop()
    # error constraints per cell: x[u] gth (N + sum_i x[i] p[i] g) <= p[u] g
    for u in np.nonzero(net.err_user & (net.gth > 0))[0]:
        for c in range(C):
            j = unit[c]
            sig = p[u, c] * net.gd[u, c]
            if sig <= 0:
                continue
            grp = tm.new(f"error u{u} c{c}")
            k0 = net.gth[u] / sig
            tm.add(grp, np.log(k0 * net.noise), [xv[u, j]], [1.0])
            for i in np.nonzero(net.cross[u, :, c] > 0)[0]:
                if p[i, c] > 0:
                    tm.add(grp, np.log(k0 * p[i, c] * net.cross[u, i, c]), [xv[u, j], xv[i, j]], [1.0, 1.0])
    # URLLC single-column constraints (dynamic frame only)
    if net.dynamic:
        tau = cfg.column_slack
        F, N = net.F, net.N
        for u in np.nonzero(net.urllc)[0]:
            xs = x0[u].reshape(F, N)                  # dynamic: unit == cell
            al0 = xs.sum(axis=0)
            be0 = xs.sum()
            av = gp.add_variables(f"alpha{u}", N, al0 * 1e-3, F)
            bv = gp.add_variable(f"beta{u}", be0 * 1e-3, F * N)
            wv = gp.add_variables(f"omega{u}", N, 1.0, 1.0 + tau + F * F * 2)
            om0 = 0.5 * ((1.0 + al0 * be0) + (1.0 + tau + al0 ** 2))
            start.update(zip(av, np.log(al0)))
            start[bv] = np.log(be0)
            start.update(zip(wv, np.log(np.maximum(om0, 1.0 + 1e-12))))
            xu = xv[u].reshape(F, N)
            for n in range(N):
                grp = tm.new(f"column u{u} n{n} a")
                tm.add(grp, 0.0, [wv[n]], [-1.0])
                tm.add(grp, 0.0, [av[n], bv, wv[n]], [1.0, 1.0, -1.0])
                # omega <= condensed(1 + tau + alpha^2)
                ph = (1.0 + tau) / (1.0 + tau + al0[n] ** 2)
                xi = 1.0 - ph
                grp = tm.new(f"column u{u} n{n} b")
                tm.add(grp, -(ph * np.log((1.0 + tau) / ph) - xi * np.log(xi)),
                       [wv[n], av[n]], [1.0, -2.0 * xi])
                nu = xs[:, n] / al0[n]
                gp.add_monomial_eq(float(np.dot(nu, np.log(nu))), [av[n]] + list(xu[:, n]),
                                   [1.0] + list(-nu), f"alpha u{u} n{n}")
            delta = (xs / be0).ravel()
            gp.add_monomial_eq(float(np.dot(delta, np.log(delta))), [bv] + list(xu.ravel()),
                               [1.0] + list(-delta), f"beta u{u}")
    tm.flush(gp)
    return AssignGp(gp, xv, zv, zeta2, start)


def _assign_point(ag: AssignGp, s_prev, net: _Net, cfg: AsmConfig) -> np.ndarray:
    gp = ag.gp
    lo = np.log(np.asarray(gp.lower))
    hi = np.log(np.asarray(gp.upper))
    x = 0.5 * (lo + hi)
    x0 = np.zeros((net.U, net.J))
    np.maximum.at(x0, (slice(None), net.unit), np.maximum(s_prev.reshape(net.U, net.C), cfg.s_floor))
    x[ag.x_index.ravel()] = np.log(np.clip(x0, cfg.s_floor, 1.0)).ravel()
    for k, v in ag.start.items():
        x[k] = v
    return np.clip(x, lo + 1e-9, hi - 1e-9)


def solve_assignment_subproblem(p_fixed, s_init, real, inst, cfg: AsmConfig = AsmConfig(),
                                trace: Optional[AsmTrace] = None, outer: int = 0, _net=None):
    """Repeated assignment GPs with the powers fixed; returns (s, converged)."""
    net = _net or _Net(inst, real)
    U, C = net.U, net.C
    p = p_fixed.reshape(U, C)
    s = s_init.reshape(U, C).copy()
    J = net.objective(p, s)
    feasible = net.residual(p, s) <= cfg.accept_tol
    for it in range(cfg.max_inner):
        ag = build_assignment_gp(p, s, real, inst, cfg, _net=net)
        cp = cc.gp_to_convex(ag.gp)
        sol = cc.solve_convex(cp, tol=cfg.solver_tol * max(1.0, J), u0=_assign_point(ag, s, net, cfg),
                              margin=cfg.gp_margin)
        if trace is not None:
            trace.assignment_iterations += 1
            trace.assignment_ipm_iterations += sol.iterations
            trace.kkt_residuals.append(sol.kkt_residual)
        if sol.status == "Infeasible":
            if not feasible:
                raise Infeasible("assignment subproblem has no feasible point")
            break
        xs = sol.x[ag.x_index]
        s_new = xs[:, net.unit]
        accepted = None
        lam = 1.0
        for _ in range(cfg.max_backtrack + 1):
            s_try = s + lam * (s_new - s)
            res = net.residual(p, s_try)
            J_try = net.objective(p, s_try)
            if feasible:
                if res <= cfg.accept_tol and J_try >= J:
                    accepted = (s_try, J_try, res)
                    break
            elif res <= cfg.accept_tol:
                accepted = (s_try, J_try, res)
                break
            lam *= 0.5
        if accepted is None:
            if not feasible:
                raise Infeasible("assignment step could not restore feasibility")
            break
        gap = accepted[1] - J
        s, J = accepted[0], accepted[1]
        if trace is not None:
            trace.record(outer, "assignment" if feasible else "restore", it, J, accepted[2])
        was_feasible, feasible = feasible, True
        if was_feasible and gap <= cfg.eps2 * max(1.0, abs(J)):
            return s, True
    return s, False


# ---- initialisation, rounding, driver -----------------------------------------

def initial_state(inst: NetworkInstance, real: ChannelRealization, cfg: AsmConfig = AsmConfig()
                  ) -> AllocationState:
    """Striped relaxed start.

    URLLC users of a BS take one slot column each (round robin over columns),
    the other users are striped over the remaining cells.  The designated user
    of a cell gets ``init_share`` and the rest is split evenly among the other
    eligible users; URLLC users stay at the floor outside their column.
    Powers start at P_max / (F N).  Error-constrained links whose SINR bound
    fails at the start are scaled down to the largest admissible weight.
    """
    net = _Net(inst, real)
    U, C, F, N = net.U, net.C, net.F, net.N
    s = np.full((U, C), cfg.s_floor)
    unit = net.unit
    for b in range(net.B):
        mine = np.nonzero(net.ub == b)[0]
        url = [u for u in mine if net.urllc[u]] if net.dynamic else []
        rest = [u for u in mine if u not in url]
        col = {u: i % N for i, u in enumerate(url)}
        cells_of_col = {n: [f * N + n for f in range(F)] for n in range(N)}
        designated = -np.ones(C, dtype=int)
        for u, n in col.items():
            for c in cells_of_col[n]:
                if designated[c] < 0:
                    designated[c] = u
        free_units = [j for j in range(net.J) if all(designated[c] < 0 for c in np.nonzero(unit == j)[0])]
        for i, j in enumerate(free_units):
            if rest:
                designated[unit == j] = rest[i % len(rest)]
        for c in range(C):
            d = designated[c]
            elig = [u for u in rest] + ([u for u in url if c in cells_of_col[col[u]]])
            if d < 0 and not elig:
                continue
            others = [u for u in elig if u != d]
            if d >= 0:
                s[d, c] = cfg.init_share if others else 1.0
            for u in others:
                s[u, c] = max((1.0 - (cfg.init_share if d >= 0 else 0.0)) / len(others), cfg.s_floor)
    # keep unit-constant values for composite blocks
    for j in range(net.J):
        cells = np.nonzero(unit == j)[0]
        s[:, cells] = s[:, cells].min(axis=1, keepdims=True)
    p = np.repeat((net.pmax[net.ub] / C)[:, None], C, axis=1)
    # shrink error-constrained weights that violate s*gth*(N+I) <= p g
    for _ in range(3):
        gam = net.sinr(p, s)
        cap = np.where(net.err_user[:, None] & (net.gth[:, None] > 0),
                       gam / np.maximum(net.gth[:, None], 1e-300), np.inf)
        capu = np.full((U, net.J), np.inf)
        np.minimum.at(capu.T, unit, cap.T)
        s = np.maximum(np.minimum(s, capu[:, unit] * (1 - 1e-6)), cfg.s_floor)
    return AllocationState(net.shape3(p), net.shape3(s), relaxed=True)


def round_assignment(s_relaxed: np.ndarray, p_fixed: np.ndarray, real: ChannelRealization,
                     inst: NetworkInstance, policy: str = "half_max",
                     floor_repair: bool = True) -> np.ndarray:
    """Binary assignment from a relaxed one.

    Each (BS, unit) goes to the user with the largest relaxed weight if that
    weight is at least half of the largest weight the BS holds anywhere
    (``half_max``) or unconditionally (``argmax``).  In the dynamic frame a
    URLLC user then keeps only the slot column carrying most of its rate.
    With ``floor_repair`` a user whose estimated rate misses its floor then
    takes further units (by relaxed weight) from users that can spare them.
    """
    net = _Net(inst, real)
    U, C = net.U, net.C
    s = s_relaxed.reshape(U, C)
    p = p_fixed.reshape(U, C)
    x = np.zeros((U, net.J))
    np.maximum.at(x, (slice(None), net.unit), s)
    out = np.zeros((U, net.J))
    for b in range(net.B):
        mine = np.nonzero(net.ub == b)[0]
        if len(mine) == 0:
            continue
        xb = x[mine]
        thr = 0.5 * xb.max() if policy == "half_max" else 0.0
        win = np.argmax(xb, axis=0)
        best = xb[win, np.arange(net.J)]
        ok = best > max(thr, 1e-9) if policy == "half_max" else best > 0
        out[mine[win[ok]], np.nonzero(ok)[0]] = 1.0
    sb = out[:, net.unit]
    if net.dynamic:
        rates = np.where(sb > 0, net.link_rates(np.maximum(p, 1e-300), sb), 0.0)
        for u in np.nonzero(net.urllc)[0]:
            per_col = rates[u].reshape(net.F, net.N).sum(axis=0)
            occ = sb[u].reshape(net.F, net.N).sum(axis=0)
            if (occ > 0).sum() > 1:
                keep = int(np.argmax(np.where(occ > 0, per_col + 1e-300 * occ, -1.0)))
                m = np.zeros((net.F, net.N))
                m[:, keep] = 1.0
                sb[u] = sb[u] * m.ravel()
    if floor_repair:
        sb = _repair_floors(sb, x, net)
    return net.shape3(sb)


def _waterfill_targets(net: "_Net", sb, I, margin):
    """Per-cell SINR targets meeting each floor at least power given interference I.

    With effective noise n_c = (I_c + N) / g_c the cheapest split of a rate
    floor is gamma_c = max(lam / n_c - 1, lo), lo being the error threshold
    for error-constrained users; lam is found by bisection.
    """
    tgt = np.zeros((net.U, net.C))
    for u in np.nonzero(sb.sum(axis=1) > 0)[0]:
        cells = np.nonzero(sb[u] > 0)[0]
        lo = net.gth[u] * margin if net.err_user[u] else 0.0
        nc = (I[u, cells] + net.noise) / net.gd[u, cells]
        need = net.floors[u] * margin
        rate = lambda g: net.psi * np.log2(1.0 + g).sum()
        g = np.full(len(cells), lo)
        if need / net.psi > 1000.0:                       # beyond double range
            tgt[u, cells] = np.inf
            continue
        if rate(g) < need:
            a, b = 0.0, float(nc.max()) * (2.0 ** (need / net.psi) + 1.0)
            for _ in range(100):
                lam = 0.5 * (a + b)
                if rate(np.maximum(lam / nc - 1.0, lo)) < need:
                    a = lam
                else:
                    b = lam
            g = np.maximum(b / nc - 1.0, lo)
        tgt[u, cells] = g
    return tgt


def _target_binary(net: "_Net", margin: float = 1.05, refine: int = 3):
    """Feasible binary allocation from a floor-aware assignment and SINR targets.

    Floor users receive units greedily (see ``_repair_floors``); rate floors
    are split into per-cell SINR targets by water-filling against the current
    interference, and the minimum powers meeting all targets on a cell solve a
    small linear system across the BSs sharing it.  When a cell's targets are
    unreachable the most interfered user that can spare the unit gives it up.
    A few refinement passes update the interference used for the split.
    Returns (p, sb) or None when no split fits the power budgets.
    """
    U, C = net.U, net.C
    sb = _repair_floors(np.zeros((U, C)), np.zeros((U, net.J)), net)
    I = np.zeros((U, C))
    left = refine
    for _ in range(C + refine + 1):
        n_u = sb.sum(axis=1)
        if np.any((net.floors > 0) & (n_u == 0)):
            return None
        tgt = _waterfill_targets(net, sb, I, margin)
        if not np.all(np.isfinite(tgt)):
            return None
        p = np.zeros((U, C))
        bad = None
        for c in range(C):
            act = np.nonzero(sb[:, c] > 0)[0]
            if len(act) == 0:
                continue
            gd = net.gd[act, c]
            theta = tgt[act, c, None] * net.cross[act][:, act, c] / gd[:, None]
            rhs = tgt[act, c] * net.noise / gd
            try:
                pc = np.linalg.solve(np.eye(len(act)) - theta, rhs)
            except np.linalg.LinAlgError:
                pc = -np.ones(len(act))
            if np.any(pc < 0) or np.max(np.abs(np.linalg.eigvals(theta))) >= 1.0:
                spare = n_u[act] > np.sum(net.unit == net.unit[c])
                bad = (act[np.argmax(theta.sum(axis=1) - 1e9 * ~spare)], c)
                break
            p[act, c] = pc
        if bad is not None:
            u, c = bad
            sb[u, net.unit == net.unit[c]] = 0.0
            continue
        used = np.zeros(net.B)
        np.add.at(used, net.ub, p.sum(axis=1))
        if np.all(used <= net.pmax):
            return p, sb
        if left == 0:
            return None
        left -= 1
        I = net.interference(p, sb)
    return None


def _target_start(net: "_Net", cfg: AsmConfig):
    """Relaxed version of ``_target_binary``: winners keep 1 - (n_b - 1) s_floor."""
    tb = _target_binary(net)
    if tb is None:
        return None
    p, sb = tb
    n_b = np.bincount(net.ub, minlength=net.B)
    fl = cfg.s_floor
    s = np.where(sb > 0, 1.0 - (n_b[net.ub][:, None] - 1) * fl, fl)
    # unassigned pairs keep a trickle of power; error users need gamma >= s gth there too
    p_lo = net.pmax[net.ub][:, None] * 1e-9
    inter = net.interference(p, sb) + net.noise
    p_err = 4.0 * fl * net.gth[:, None] * inter / net.gd
    p_try = np.where(sb > 0, p, np.maximum(p_lo, p_err))
    if net.residual(p_try, s) > cfg.accept_tol:
        return None
    return p_try, s


def _power_polish(sb, p0, real, inst, cfg, net):
    """Yield the power-subproblem solution from p0 on a fixed binary assignment, then p0."""
    try:
        pb, _ = solve_power_subproblem(sb, p0, real, inst, cfg, None, 0, _net=net)
        yield np.where(sb > 0, pb, 0.0)
    except Infeasible:
        pass
    yield p0


def _uniform_estimates(net: "_Net"):
    """SINR per (user, cell) and rate per (user, unit) when every BS spreads P_max evenly."""
    tx = np.repeat((net.pmax / net.C)[:, None], net.C, axis=1)
    I = np.einsum("bc,buc->uc", tx, net.g) - tx[net.ub] * net.gd
    snr = tx[net.ub] * net.gd / (I + net.noise)
    est = np.zeros((net.U, net.J))
    np.add.at(est, (slice(None), net.unit), net.psi * np.log2(1.0 + snr))
    return snr, est


def _drop_weak_unit(sb, net: "_Net") -> Optional[np.ndarray]:
    """Take the unit with the weakest estimated SINR margin away from an error-constrained user.

    The unit goes to the same BS's eMBB user with the best estimated rate on
    it (eMBB links carry no error ceiling), or stays empty.  Returns None
    when no error-constrained user holds more than one unit.
    """
    snr, est = _uniform_estimates(net)
    own = np.zeros((net.U, net.J))
    np.maximum.at(own, (slice(None), net.unit), sb)
    worst = np.full((net.U, net.J), np.inf)
    np.minimum.at(worst, (slice(None), net.unit), snr)
    ratio = np.where((own > 0) & net.err_user[:, None] & (own.sum(axis=1) > 1)[:, None],
                     worst / np.maximum(net.gth[:, None], 1e-300), np.inf)
    if not np.isfinite(ratio).any():
        return None
    u, j = np.unravel_index(np.argmin(ratio), ratio.shape)
    own[u, j] = 0.0
    cand = [k for k in np.nonzero(net.ub == net.ub[u])[0] if not net.err_user[k]]
    if cand:
        own[max(cand, key=lambda k: est[k, j]), j] = 1.0
    return own[:, net.unit]


def _repair_floors(sb, x, net: "_Net", margin: float = 1.2) -> np.ndarray:
    """Move whole units to users whose estimated rate is below margin * floor.

    Rates are estimated with every BS spreading P_max uniformly over all
    cells.  A unit is taken from its owner only when the owner has no floor
    or keeps margin * floor without it; error-constrained users only take
    units whose estimated SINR clears their threshold with room to spare.
    """
    snr, est = _uniform_estimates(net)
    ok_err = np.ones((net.U, net.J), dtype=bool)
    if net.err_user.any():
        worst = np.full((net.U, net.J), np.inf)
        np.minimum.at(worst, (slice(None), net.unit), snr)
        ok_err = ~net.err_user[:, None] | (worst >= 1.5 * net.gth[:, None])
    own = np.zeros((net.U, net.J))
    np.maximum.at(own, (slice(None), net.unit), sb)
    fl = net.floors
    for b in range(net.B):
        mine = np.nonzero(net.ub == b)[0]
        for _ in range(net.J):
            r = (own * est).sum(axis=1)
            short = [u for u in mine if fl[u] > 0 and r[u] < margin * fl[u]]
            if not short:
                break
            u = max(short, key=lambda k: (margin * fl[k] - r[k]) / fl[k])
            free = (own[u] == 0) & (est[u] > 0)
            # units clearing the error threshold first, then the rest by estimated rate
            order = sorted(np.nonzero(free & ok_err[u])[0], key=lambda j: (-x[u, j], -est[u, j]))
            order += sorted(np.nonzero(free & ~ok_err[u])[0], key=lambda j: -est[u, j])
            moved = False
            for j in order:
                holder = mine[own[mine, j] > 0]
                v = holder[0] if len(holder) else None
                if v is not None and fl[v] > 0 and r[v] - est[v, j] < margin * fl[v]:
                    continue
                if v is not None:
                    own[v, j] = 0.0
                own[u, j] = 1.0
                moved = True
                break
            if not moved:
                # nothing left to take for this user; leave the rest to the power repair
                fl = fl.copy()
                fl[u] = 0.0
    return own[:, net.unit]


@dataclass
class AsmResult:
    state: AllocationState
    trace: AsmTrace
    relaxed: AllocationState
    relaxed_objective: float


def run_asm(inst: NetworkInstance, real: ChannelRealization, cfg: AsmConfig = AsmConfig(),
            init: Optional[AllocationState] = None):
    """Alternating search; returns (binary AllocationState, AsmTrace).

    Raises Infeasible when the precheck fails (with ``cfg.precheck``), when no
    feasible relaxed iterate can be reached, or when the rounded assignment
    cannot be repaired; the exception carries the best state found.
    """
    res = run_asm_detailed(inst, real, cfg, init)
    return res.state, res.trace


def run_asm_detailed(inst, real, cfg: AsmConfig = AsmConfig(), init=None) -> AsmResult:
    if cfg.precheck:
        from .monotonic import feasibility_check
        chk = feasibility_check(inst, real)
        if not chk.feasible:
            raise Infeasible("precheck: rate floors cannot be met", state=None)
    net = _Net(inst, real)
    U, C = net.U, net.C
    trace = AsmTrace()
    st = init.copy() if init is not None else initial_state(inst, real, cfg)
    p = st.p.reshape(U, C).astype(float)
    s = np.clip(st.s.reshape(U, C).astype(float), 0.0, 1.0)
    if init is None or st.relaxed:
        s = np.maximum(s, cfg.s_floor)
    p = np.where(s > 0, np.maximum(p, net.pmax[net.ub][:, None] * 1e-9), 0.0)

    # restoration: reach a point satisfying the relaxed constraints
    if net.residual(p, s) > cfg.accept_tol:
        ok = False
        for _ in range(2):
            trace.restoration_steps += 1
            try:
                p, _ = solve_power_subproblem(s, p, real, inst, cfg, trace, 0, _net=net)
                ok = net.residual(p, s) <= cfg.accept_tol
            except Infeasible:
                pass
            if ok:
                break
            trace.restoration_steps += 1
            try:
                s, _ = solve_assignment_subproblem(p, s, real, inst, cfg, trace, 0, _net=net)
                ok = net.residual(p, s) <= cfg.accept_tol
            except Infeasible:
                pass
            if ok:
                break
        if not ok:
            # SINR-target start: binary, so the assignment block starts from a corner
            start = _target_start(net, cfg)
            if start is not None:
                p, s = start
                trace.restoration_steps += 1
                ok = True
        if not ok:
            trace.termination = "infeasible start"
            raise Infeasible("no feasible relaxed iterate found",
                             state=AllocationState(net.shape3(p), net.shape3(s), True))
    J = net.objective(p, s)
    trace.record(0, "start", 0, J, net.residual(p, s))

    trace.termination = "max_outer"
    for outer in range(1, cfg.max_outer + 1):
        trace.outer_iterations = outer
        J0 = J
        p, _ = solve_power_subproblem(s, p, real, inst, cfg, trace, outer, _net=net)
        J1 = net.objective(p, s)
        s, _ = solve_assignment_subproblem(p, s, real, inst, cfg, trace, outer, _net=net)
        J = net.objective(p, s)
        if J1 - J0 <= cfg.eps1 * max(1.0, abs(J0)) and J - J1 <= cfg.eps2 * max(1.0, abs(J1)):
            trace.termination = "converged"
            break
    relaxed = AllocationState(net.shape3(p), net.shape3(s), True)
    J_relaxed = J

    best = None
    for policy in dict.fromkeys([cfg.rounding, "argmax"]):
        sb = round_assignment(s, p, real, inst, policy).reshape(U, C)
        for _ in range(cfg.max_unit_drops + 1):
            try:
                pb, _ = solve_power_subproblem(sb, np.where(sb > 0, p, 0.0), real, inst, cfg,
                                               None, 0, _net=net)
                cand = AllocationState(net.shape3(np.where(sb > 0, pb, 0.0)), net.shape3(sb), False)
                if qos_report(cand, real, inst).feasible:
                    best = cand
                    break
            except Infeasible:
                pass
            # error ceilings are the usual obstacle: shed the weakest error-constrained unit
            sb = _drop_weak_unit(sb, net)
            if sb is None:
                break
        if best is not None:
            break
    if best is None:
        # fall back on the SINR-target allocation, polished by one power solve
        tb = _target_binary(net)
        if tb is not None:
            pt, sb = tb
            for cand_p in _power_polish(sb, pt, real, inst, cfg, net):
                cand = AllocationState(net.shape3(cand_p), net.shape3(sb), False)
                if qos_report(cand, real, inst).feasible:
                    best = cand
                    break
    if best is None:
        trace.termination = "rounding infeasible"
        raise Infeasible("rounded assignment could not be repaired", state=relaxed)
    trace.record(trace.outer_iterations, "rounded", 0, net.objective(best.p.reshape(U, C),
                                                                    best.s.reshape(U, C)), 0.0)
    return AsmResult(best, trace, relaxed, J_relaxed)
