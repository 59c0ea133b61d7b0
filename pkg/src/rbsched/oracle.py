"""Brute-force reference solvers for tiny instances (test fixtures and the ``oracle`` CLI).

``brute_force`` enumerates every exclusive assignment (with the URLLC
single-column rule in D-RBS) and, for each, searches a uniform per-link power
grid of ``grid`` levels 0 .. P_max exactly.  It needs B = 1: without
inter-cell interference a link's rate depends on its own power only, so the
grid search is a max-plus knapsack over power units instead of a product grid.

``grid_feasible`` decides SINR-target feasibility by scanning a joint power
grid; it backs the tests of the eigenvalue-based check.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .channel import ChannelRealization
from .model import NetworkInstance, Scenario, ServiceClass
from .rate import PROB_ATOL, RATE_RTOL, AllocationState, q_approx_error, shannon_rate_from_sinr


@dataclass
class OracleResult:
    value: float
    state: Optional[AllocationState]
    assignments: int                   # assignments enumerated


def _maxplus(a: np.ndarray, b: np.ndarray):
    """c[k] = max_{i <= k} a[i] + b[k - i] with the maximising i."""
    n = len(a)
    k = np.arange(n)[:, None] - np.arange(n)[None, :]
    v = np.where(k >= 0, a[None, :] + b[np.clip(k, 0, None)], -np.inf)
    i = np.argmax(v, axis=1)
    return v[np.arange(n), i], i


def _assignments(inst: NetworkInstance):
    """Yield owner arrays (units,) with -1 for an idle unit, one per exclusive assignment."""
    fr = inst.frame
    blocks = fr.blocks
    users = list(range(inst.U))
    urllc = [u.service == ServiceClass.URLLC for u in inst.users]
    cols = [set(n for n in range(b.n0, b.n0 + b.nn)) for b in blocks]
    for own in itertools.product([-1] + users, repeat=len(blocks)):
        if fr.scenario == Scenario.DYNAMIC:
            ok = True
            for u in users:
                if urllc[u]:
                    cs = set().union(*[cols[j] for j, o in enumerate(own) if o == u]) if u in own else set()
                    if len(cs) > 1:
                        ok = False
                        break
            if not ok:
                continue
        yield np.array(own)


def brute_force(inst: NetworkInstance, real: ChannelRealization, grid: int = 200) -> OracleResult:
    """Best sum-rate over assignments x per-link power grid (B = 1 only); value -inf if none is feasible."""
    if inst.B != 1:
        raise ValueError("brute_force handles single-BS instances only")
    fr = inst.frame
    U, C = inst.U, fr.num_cells
    unit = fr.unit_of_cell()
    pmax = float(inst.p_max[0])
    levels = np.arange(grid) * pmax / (grid - 1)
    gd = real.flat()[0]                                       # (U, C)
    gam = levels[None, None, :] * gd[:, :, None] / inst.noise
    rate = shannon_rate_from_sinr(gam, fr.psi)                # (U, C, grid)
    for u, usr in enumerate(inst.users):
        if usr.service != ServiceClass.EMBB:
            err = np.asarray(q_approx_error(gam[u], usr.payload_bits, fr.psi))
            rate[u] = np.where(err <= usr.eps_max + PROB_ATOL, rate[u], -np.inf)
    floors = inst.rate_floors
    cache: dict = {}

    def user_table(u, cells):
        key = (u, cells)
        if key not in cache:
            t = np.zeros(grid)
            t[1:] = -np.inf
            t[0] = 0.0
            picks = []
            for c in cells:
                link = np.maximum.accumulate(rate[u, c])       # unused units may stay idle
                t, i = _maxplus(link, t)
                picks.append(i)
            # keep the best table entry for at most k units
            cm = np.maximum.accumulate(t)
            arg = np.array([int(np.argmax(t[: k + 1])) for k in range(grid)])
            if floors[u] > 0:
                cm = np.where(cm >= floors[u] * (1.0 - RATE_RTOL), cm, -np.inf)
            cache[key] = (cm, arg, picks)
        return cache[key]

    best, best_own, count = -np.inf, None, 0
    for own in _assignments(inst):
        count += 1
        cell_owner = own[unit]
        tot = np.zeros(grid)
        for u in range(U):
            cells = tuple(np.nonzero(cell_owner == u)[0])
            tot, _ = _maxplus(user_table(u, cells)[0], tot)
            if tot[-1] == -np.inf:
                break
        if tot[-1] > best:
            best, best_own = float(tot[-1]), own.copy()
    if best_own is None:
        return OracleResult(-np.inf, None, count)
    return OracleResult(best, _traceback(inst, best_own, user_table, rate, levels, grid), count)


def _traceback(inst, own, user_table, rate, levels, grid) -> AllocationState:
    fr = inst.frame
    U, C = inst.U, fr.num_cells
    cell_owner = own[fr.unit_of_cell()]
    tabs = [user_table(u, tuple(np.nonzero(cell_owner == u)[0])) for u in range(U)]
    # split the unit budget across users
    tot = np.zeros(grid)
    splits = []
    for u in range(U):
        tot, i = _maxplus(tabs[u][0], tot)
        splits.append(i)
    k = grid - 1
    units = np.zeros(U, dtype=int)
    for u in reversed(range(U)):
        units[u] = splits[u][k]                             # i indexes the newer operand
        k -= units[u]
    p = np.zeros((U, C))
    s = np.zeros((U, C))
    for u in range(U):
        cells = list(np.nonzero(cell_owner == u)[0])
        s[u, cells] = 1.0
        cm, arg, picks = tabs[u]
        k = arg[units[u]]
        for c, pick in zip(reversed(cells), reversed(picks)):
            kk = pick[k]
            k -= kk
            # the link table was a running max: take the first level reaching it
            p[u, c] = levels[int(np.argmax(rate[u, c, : kk + 1]))]
    shape = (U, fr.F, fr.N)
    return AllocationState(p.reshape(shape), s.reshape(shape), False)


def grid_feasible(gd: np.ndarray, cross: np.ndarray, targets: np.ndarray, noise: float,
                  pmax: np.ndarray, step: float = 1e-3) -> bool:
    """Does a joint power grid (step * P_max per link) contain a point meeting every SINR target?

    Links as in ``monotonic.solve_cell_powers``; pmax[i] is link i's own budget.
    """
    n = len(gd)
    axes = [np.arange(0.0, 1.0 + step / 2, step) * pmax[i] for i in range(n)]
    P = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    ok = np.ones(len(P), dtype=bool)
    for i in range(n):
        interf = P @ cross[i] + noise
        ok &= P[:, i] * gd[i] >= targets[i] * interf
    return bool(ok.any())
