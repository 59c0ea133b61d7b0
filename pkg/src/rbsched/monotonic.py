"""Global solver: SINR-target feasibility, ray projection and polyblock outer approximation.

The search variable is the SINR profile y[u, c] over (user, small cell).  The
feasible set is Y = G & H where G (normal) holds profiles reachable by some
exclusive assignment and powers inside the budgets, and H (conormal in the
rate floors) holds the rate-floor and error-ceiling requirements.  Objective
R(y) = sum psi * log2(1 + y) is in the same units as ``rate.sum_rate``.

A polyblock vertex whose support breaks exclusivity (two users of one BS on
one assignment unit) or the URLLC single-column rule has projection beta = 0
on G; instead of the n children v - v_i e_i such a vertex is split exactly by
the conflict: one child per user (or column) allowed to keep the contested
components.  Every point of Y below the vertex lies below one child.
"""
from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .channel import ChannelRealization
from .errors import Infeasible, IterLimit, SingularSystem
from .model import NetworkInstance, Scenario, ServiceClass
from .rate import AllocationState, PROB_ATOL, RATE_RTOL, q_approx_error, user_sinr_thresholds

ACTIVE_TOL = 1e-9
TARGET_RULES = ("single", "even_split")


# ---- SINR-target power solve -------------------------------------------------

def solve_cell_powers(gd: np.ndarray, cross: np.ndarray, targets: np.ndarray, noise: float):
    """Minimum powers meeting SINR targets on one cell.

    gd[i] is link i's direct gain, cross[i, j] the gain from link j's BS to
    link i's user (0 on the diagonal), targets[i] >= 0.  Returns
    (p, spectral radius of Theta); p is None when the radius is >= 1 or a
    power comes out negative.  Raises SingularSystem for a singular I - Theta.
    """
    t = np.asarray(targets, dtype=float)
    theta = t[:, None] * cross / gd[:, None]
    rho = float(np.max(np.abs(np.linalg.eigvals(theta)))) if len(t) > 1 else 0.0
    if rho >= 1.0:
        return None, rho
    M = np.eye(len(t)) - theta
    if np.linalg.cond(M) > 1e12:
        raise SingularSystem(f"I - Theta is singular (cond {np.linalg.cond(M):.3g})")
    p = np.linalg.solve(M, t * noise / gd)
    if np.any(p < -1e-12 * max(1.0, np.abs(p).max())):
        return None, rho
    return np.maximum(p, 0.0), rho


class _Links:
    """Per-cell gain views for the (U, C) SINR profile."""

    def __init__(self, inst: NetworkInstance, real: ChannelRealization):
        fr = inst.frame
        self.inst = inst
        self.U, self.B, self.C = inst.U, inst.B, fr.num_cells
        self.ub = inst.user_bs
        self.g = real.flat()                                   # (B, U, C)
        self.gd = self.g[self.ub, np.arange(self.U)]           # (U, C)
        self.noise = inst.noise
        self.pmax = inst.p_max
        self.psi = fr.psi
        self.floors = inst.rate_floors
        self.gth = user_sinr_thresholds(inst)
        self.err = np.array([u.service != ServiceClass.EMBB for u in inst.users])
        self.urllc = np.array([u.service == ServiceClass.URLLC for u in inst.users])
        self.eps = np.array([u.eps_max for u in inst.users])
        self.kappa = np.array([u.payload_bits for u in inst.users])
        self.unit = fr.unit_of_cell()
        self.J = fr.num_units
        self.dynamic = fr.scenario == Scenario.DYNAMIC
        self.col = np.arange(self.C) % fr.N

    def powers(self, y: np.ndarray):
        """Powers realising profile y exactly, or None when y is outside G.

        Exclusivity, the single-column rule and nonnegativity are checked
        here; the budgets are left to the caller.
        """
        p = np.zeros((self.U, self.C))
        for c in range(self.C):
            act = np.nonzero(y[:, c] > ACTIVE_TOL)[0]
            if len(act) == 0:
                continue
            if len(np.unique(self.ub[act])) < len(act):
                return None
            gd = self.gd[act, c]
            if np.any(gd <= 0):
                return None
            cross = self.g[self.ub[act]][:, act, c].T.copy()   # cross[i, j] = g[b_j, u_i, c]
            np.fill_diagonal(cross, 0.0)
            pc, _ = solve_cell_powers(gd, cross, y[act, c], self.noise)
            if pc is None:
                return None
            p[act, c] = pc
        return p

    def in_g(self, y: np.ndarray):
        if self.conflict(y) is not None:
            return None
        try:
            p = self.powers(y)
        except SingularSystem:
            return None
        if p is None:
            return None
        used = np.zeros(self.B)
        np.add.at(used, self.ub, p.sum(axis=1))
        if np.any(used > self.pmax):
            return None
        return p

    def user_rates(self, y):
        return self.psi * np.log2(1.0 + y).sum(axis=1)

    def in_h(self, y) -> bool:
        fl = self.floors > 0
        if np.any(self.user_rates(y)[fl] < self.floors[fl] * (1.0 - RATE_RTOL)):
            return False
        for u in np.nonzero(self.err)[0]:
            act = y[u] > ACTIVE_TOL
            if act.any():
                e = np.atleast_1d(q_approx_error(y[u, act], self.kappa[u], self.psi))
                if np.any(e > self.eps[u] + PROB_ATOL):
                    return False
        return True

    def conflict(self, y):
        """First exclusivity or single-column conflict as a list of candidate keeps, else None."""
        pos = y > ACTIVE_TOL
        held = np.zeros((self.U, self.J), dtype=bool)
        np.logical_or.at(held, (slice(None), self.unit), pos)
        for b in range(self.B):
            users = np.nonzero(self.ub == b)[0]
            cnt = held[users].sum(axis=0)
            for j in np.nonzero(cnt > 1)[0]:
                return [("unit", int(u), int(j), users[held[users, j]]) for u in users[held[users, j]]]
        if self.dynamic:
            for u in np.nonzero(self.urllc)[0]:
                cols = np.unique(self.col[pos[u]])
                if len(cols) > 1:
                    return [("column", int(u), int(n), None) for n in cols]
        return None

    def tighten(self, v):
        """Zero components no point of H below v can use; None if v falls outside H."""
        v = v.copy()
        for u in np.nonzero(self.err)[0]:
            for j in np.unique(self.unit[v[u] > ACTIVE_TOL]):
                cells = self.unit == j
                if np.any(v[u, cells] < self.gth[u] * (1.0 - 1e-12)):
                    v[u, cells] = 0.0
        fl = self.floors > 0
        if np.any(self.user_rates(v)[fl] < self.floors[fl] * (1.0 - RATE_RTOL)):
            return None
        return v

    def objective(self, y) -> float:
        return float(self.psi * np.log2(1.0 + y).sum())

    def bound(self, v) -> float:
        """Upper bound on R over {x <= v} & G: per-BS water-filling without interference.

        Interference only raises the power a profile needs, so every x in G
        meets sum_(u, c of b) x noise / g <= P_max; maximising R over that
        budget and the box is a capped water-filling solved by bisection.
        """
        total = 0.0
        for b in range(self.B):
            m = (self.ub == b)[:, None] & (v > ACTIVE_TOL)
            cap = v[m]
            if cap.size == 0:
                continue
            a = self.noise / self.gd[m]
            if a @ cap <= self.pmax[b]:
                total += np.log2(1.0 + cap).sum()
                continue
            lo, hi = -60.0, 60.0                      # log of the water level
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                x = np.clip(np.exp(mid) / a - 1.0, 0.0, cap)
                if a @ x > self.pmax[b]:
                    hi = mid
                else:
                    lo = mid
            total += np.log2(1.0 + np.clip(np.exp(lo) / a - 1.0, 0.0, cap)).sum()
        return float(self.psi * total)


# ---- feasibility check ------------------------------------------------------------

@dataclass
class FeasibilityResult:
    feasible: bool
    p: Optional[np.ndarray]            # (U, F, N) powers meeting the targets, when feasible
    targets: np.ndarray                # (U, F, N) SINR targets that were checked
    spectral_radius: float
    reason: str = ""


def rate_targets(inst: NetworkInstance, real: ChannelRealization, rule: str = "single") -> np.ndarray:
    """Convert rate floors into per-link SINR targets (U, F, N).

    ``single``: each floor user needs 2^(R / psi) - 1 on one cell, its best
    free cell by direct gain.  ``even_split``: the cells of each BS are dealt
    to its floor users (best gain first) and a user holding n cells needs
    2^(R / (psi n)) - 1 on each of them.
    """
    if rule not in TARGET_RULES:
        raise ValueError(f"unknown target rule {rule!r}; choose from {TARGET_RULES}")
    lk = _Links(inst, real)
    U, C = lk.U, lk.C
    tgt = np.zeros((U, C))
    for b in range(lk.B):
        users = [u for u in np.nonzero(lk.ub == b)[0] if lk.floors[u] > 0]
        if not users:
            continue
        free = np.ones(C, dtype=bool)
        own: dict[int, list[int]] = {u: [] for u in users}
        rounds = 1 if rule == "single" else C
        for _ in range(rounds):
            for u in users:
                if not free.any():
                    break
                c = int(np.argmax(np.where(free, lk.gd[u], -np.inf)))
                own[u].append(c)
                free[c] = False
        for u in users:
            if own[u]:
                with np.errstate(over="ignore"):
                    tgt[u, own[u]] = np.exp2(lk.floors[u] / (lk.psi * len(own[u]))) - 1.0
            else:
                tgt[u, :] = np.inf                          # more floor users than cells
    return tgt.reshape(U, inst.frame.F, inst.frame.N)


def feasibility_check(inst: NetworkInstance, real: ChannelRealization, targets=None,
                      rule: str = "single") -> FeasibilityResult:
    """Can every link meet its SINR target inside the power budgets?

    Theta[i, j] = target_i * (gain from link j's BS to link i's user) / (direct
    gain of link i) couples links sharing a cell; u_i = target_i * noise / g_i.
    Infeasible if the spectral radius of Theta is >= 1 on any cell, otherwise
    p = (I - Theta)^-1 u must be nonnegative and within every budget.
    """
    lk = _Links(inst, real)
    t = rate_targets(inst, real, rule) if targets is None else np.asarray(targets, dtype=float)
    t = t.reshape(lk.U, lk.C)
    shape = (lk.U, inst.frame.F, inst.frame.N)
    if not np.all(np.isfinite(t)):
        return FeasibilityResult(False, None, t.reshape(shape), np.inf,
                                 "unreachable target (no free cell or overflow)")
    p = np.zeros((lk.U, lk.C))
    rho_max = 0.0
    for c in range(lk.C):
        act = np.nonzero(t[:, c] > 0)[0]
        if len(act) == 0:
            continue
        if len(np.unique(lk.ub[act])) < len(act):
            raise ValueError(f"two links of one BS share cell {c}")
        gd = lk.gd[act, c]
        cross = lk.g[lk.ub[act]][:, act, c].T.copy()
        np.fill_diagonal(cross, 0.0)
        pc, rho = solve_cell_powers(gd, cross, t[act, c], lk.noise)
        rho_max = max(rho_max, rho)
        if pc is None:
            why = "spectral radius >= 1" if rho >= 1 else "negative power"
            return FeasibilityResult(False, None, t.reshape(shape), rho_max, f"cell {c}: {why}")
        p[act, c] = pc
    used = np.zeros(lk.B)
    np.add.at(used, lk.ub, p.sum(axis=1))
    if np.any(used > lk.pmax * (1.0 + 1e-12)):
        b = int(np.argmax(used - lk.pmax))
        return FeasibilityResult(False, None, t.reshape(shape), rho_max, f"BS {b} over budget")
    return FeasibilityResult(True, p.reshape(shape), t.reshape(shape), rho_max)


# ---- projection -------------------------------------------------------------------

def initial_vertex(inst: NetworkInstance, real: ChannelRealization) -> np.ndarray:
    """y0 = P_max g / (vartheta N0): the interference-free SINR at full budget, (U, F, N)."""
    gd = real.g[inst.user_bs, np.arange(inst.U)]
    return inst.p_max[inst.user_bs][:, None, None] * gd / inst.noise


def ray_bisection(member: Callable[[float], bool], Pi: float = 1e-4) -> float:
    """Largest beta in [0, 1] with member(beta), for a membership that is monotone in beta.

    Bisection stops once (hi - lo) / hi < Pi; lo is always a member.
    """
    if member(1.0):
        return 1.0
    lo, hi = 0.0, 1.0
    while (hi - lo) / hi >= Pi:
        mid = 0.5 * (lo + hi)
        if member(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class ProjectionResult:
    beta: float
    point: np.ndarray                  # beta * y, same shape as y
    p: Optional[np.ndarray]            # powers realising the point; None without certificate
    in_h: bool                         # the point also meets floors and error ceilings


def _project(lk: _Links, y: np.ndarray, Pi: float):
    """(beta, beta * y, powers, in_h) with beta the largest G-member scaling of y."""
    if lk.conflict(y) is not None or not np.any(y > ACTIVE_TOL):
        return 0.0, np.zeros_like(y), None, False
    beta = ray_bisection(lambda b: lk.in_g(b * y) is not None, Pi)
    z = beta * y
    p = lk.in_g(z)
    return beta, z, p, p is not None and lk.in_h(z)


def project_bisection(y, inst: NetworkInstance, real: ChannelRealization,
                      Pi: float = 1e-4) -> ProjectionResult:
    """beta = max{beta in [0, 1] : beta * y in G} by bisection, with H checked at the result.

    When beta * y misses the rate floors or error ceilings no smaller beta can
    recover them, so the result is the certificate-less beta = 0.
    """
    lk = _Links(inst, real)
    shape = np.shape(y)
    y2 = np.asarray(y, dtype=float).reshape(lk.U, lk.C)
    if np.any(y2 < 0):
        raise ValueError("y must be nonnegative")
    beta, z, p, ok = _project(lk, y2, Pi)
    if not ok:
        return ProjectionResult(0.0, np.zeros(shape), None, False)
    return ProjectionResult(beta, z.reshape(shape), p.reshape(shape), True)


# ---- polyblock -------------------------------------------------------------------

@dataclass
class VertexSet:
    """Polyblock vertices kept in a best-first heap; dominated vertices are dropped."""
    vertices: list = field(default_factory=list)
    values: list = field(default_factory=list)
    alive: list = field(default_factory=list)
    best: Optional[np.ndarray] = None
    iterations: int = 0
    cap: int = 200000
    _heap: list = field(default_factory=list)
    _mat: Optional[np.ndarray] = None
    _n: int = 0

    def __len__(self) -> int:
        return self._n

    def add(self, v: np.ndarray, value: float) -> bool:
        flat = v.ravel()
        if self._mat is not None and len(self.vertices):
            M = self._mat[: len(self.vertices)]
            alive = np.asarray(self.alive)
            if np.any(alive & np.all(M >= flat, axis=1)):
                return False
            dom = alive & np.all(M <= flat, axis=1)
            for i in np.nonzero(dom)[0]:
                self.alive[i] = False
                self._n -= 1
        idx = len(self.vertices)
        if self._mat is None:
            self._mat = np.zeros((64, flat.size))
        elif idx == len(self._mat):
            self._mat = np.vstack([self._mat, np.zeros_like(self._mat)])
        self._mat[idx] = flat
        self.vertices.append(v)
        self.values.append(value)
        self.alive.append(True)
        self._n += 1
        heapq.heappush(self._heap, (-value, idx))
        if self._n > self.cap:
            self._evict()
        return True

    def _evict(self):
        live = [i for i, a in enumerate(self.alive) if a]
        worst = min(live, key=lambda i: (self.values[i], -i))
        self.alive[worst] = False
        self._n -= 1

    def pop(self):
        while self._heap:
            negv, idx = heapq.heappop(self._heap)
            if self.alive[idx]:
                self.alive[idx] = False
                self._n -= 1
                return self.vertices[idx], -negv
        return None, -np.inf

    def peek_value(self) -> float:
        while self._heap and not self.alive[self._heap[0][1]]:
            heapq.heappop(self._heap)
        return -self._heap[0][0] if self._heap else -np.inf


@dataclass
class PolyblockResult:
    y: np.ndarray                      # (U, F, N) best point found (beta * y at termination)
    value: float                       # R(y)
    iterations: int
    upper_bound: float                 # largest R over the remaining polyblock at exit
    p: np.ndarray                      # (U, F, N) powers realising y
    status: str = "optimal"            # "optimal" | "exhausted" (vertex set emptied first)
    log: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.y, self.value, self.iterations))


def _polish(lk: _Links, z: np.ndarray, v: np.ndarray, Pi: float) -> np.ndarray:
    """Raise the components of a feasible z one at a time towards v while staying in G."""
    z = z.copy()
    for i in zip(*np.nonzero(z > ACTIVE_TOL)):
        if v[i] <= z[i]:
            continue
        base, top = z[i], v[i]

        def member(t):
            w = z.copy()
            w[i] = base + t * (top - base)
            return lk.in_g(w) is not None

        z[i] = base + ray_bisection(member, Pi) * (top - base)
    return z


def _level_for_floor(a, lo, need):
    """Smallest water level L with sum log2(max(lo, L / a - 1) + 1) >= need."""
    if np.log2(1.0 + lo).sum() >= need:
        return 0.0
    lo_l, hi_l = -60.0, 60.0
    for _ in range(100):
        mid = 0.5 * (lo_l + hi_l)
        x = np.maximum(lo, np.exp(mid) / a - 1.0)
        if np.log2(1.0 + x).sum() >= need:
            hi_l = mid
        else:
            lo_l = mid
    return float(np.exp(hi_l))


def _waterfill_bs(a, lo, owner, need, budget):
    """max sum log(1 + x) s.t. a @ x <= budget, x >= lo, per-owner log-rate floors.

    KKT: x_i = max(lo_i, L_u / a_i - 1) with L_u = max(w, Lmin_u); w by bisection.
    Returns None when the lower bounds and floors alone overrun the budget.
    """
    users = np.unique(owner)
    lmin = np.zeros(len(owner))
    for u in users:
        m = owner == u
        lmin[m] = _level_for_floor(a[m], lo[m], need[u])

    def alloc(w):
        return np.maximum(lo, np.maximum(w, lmin) / a - 1.0)

    if a @ alloc(0.0) > budget * (1.0 + 1e-12):
        return None
    lo_w, hi_w = -60.0, 60.0
    for _ in range(100):
        mid = 0.5 * (lo_w + hi_w)
        if a @ alloc(np.exp(mid)) > budget:
            hi_w = mid
        else:
            lo_w = mid
    return alloc(np.exp(lo_w))


def _refine(lk: _Links, z: np.ndarray, sweeps: int = 5) -> np.ndarray:
    """Re-split each BS's power over the support of z by water-filling against the current
    interference (exact for B = 1).  Returns the best feasible profile seen, z itself if
    nothing improves on it."""
    p = lk.in_g(z)
    if p is None:
        return z
    best, best_v = z, lk.objective(z)
    supp = z > ACTIVE_TOL
    lo = np.where(lk.err[:, None] & supp, lk.gth[:, None] * (1.0 + 1e-9), 0.0)
    for _ in range(sweeps):
        for b in range(lk.B):
            m = (lk.ub == b)[:, None] & supp
            if not m.any():
                continue
            # interference from the other BSs at the current powers
            a = ((_interference(lk, p) + lk.noise) / lk.gd)[m]
            owner = np.nonzero(m)[0]
            need = lk.floors / lk.psi * (1.0 + 2 * RATE_RTOL)
            x = _waterfill_bs(a, lo[m], owner, need, lk.pmax[b] * (1.0 - 1e-12))
            if x is None:
                return best
            p = p.copy()
            p[m] = x * a
        y = np.where(supp, p * lk.gd / (_interference(lk, p) + lk.noise), 0.0)
        if lk.in_h(y) and lk.in_g(y) is not None and lk.objective(y) > best_v:
            best, best_v = y, lk.objective(y)
    return best


def _interference(lk: _Links, p):
    tx = np.zeros((lk.B, lk.C))
    np.add.at(tx, lk.ub, p)
    return np.einsum("buc,bc->uc", lk.g, tx) - lk.gd * tx[lk.ub]


def polyblock_solve(inst: NetworkInstance, real: ChannelRealization, delta: Optional[float] = None,
                    Pi: float = 1e-4, max_iter: int = 5000, precheck: bool = True,
                    target_rule: str = "single", max_vertices: int = 200000,
                    log_path: str | Path | None = None) -> PolyblockResult:
    """Best-first polyblock outer approximation of max R(y) over Y.

    Stops when the best remaining vertex exceeds the incumbent by less than
    delta (default 1e-3 R(y0)).  Raises Infeasible when the precheck fails or
    no point of Y exists, and IterLimit (carrying the incumbent) after
    max_iter vertex expansions.
    """
    if precheck:
        chk = feasibility_check(inst, real, rule=target_rule)
        if not chk.feasible:
            raise Infeasible(f"precheck: {chk.reason}")
    lk = _Links(inst, real)
    shape = (lk.U, inst.frame.F, inst.frame.N)
    y0 = initial_vertex(inst, real).reshape(lk.U, lk.C)
    if delta is None:
        delta = 1e-3 * lk.objective(y0)
    vs = VertexSet(cap=max_vertices)
    v0 = lk.tighten(y0)
    if v0 is not None:
        vs.add(v0, lk.bound(v0))
    best_z, best_p, lb = None, None, -np.inf
    log = []
    it = 0
    status = "exhausted"
    while True:
        ub = vs.peek_value()
        if ub == -np.inf:
            status = "exhausted"
            break
        if ub - lb < delta:
            status = "optimal"
            break
        if it >= max_iter:
            status = "iterlimit"
            break
        v, val = vs.pop()
        it += 1
        conf = lk.conflict(v)
        if conf is not None:
            for kind, u, j, users in conf:
                w = v.copy()
                if kind == "unit":
                    cells = lk.unit == j
                    for o in users:
                        if o != u:
                            w[o, cells] = 0.0
                else:
                    w[u, lk.col != j] = 0.0
                w = lk.tighten(w)
                if w is not None:
                    wv = lk.bound(w)
                    if wv > lb + delta:
                        vs.add(w, wv)
        else:
            beta, z, _, ok = _project(lk, v, Pi)
            if ok:
                z = _refine(lk, _polish(lk, z, v, Pi))
                zv = lk.objective(z)
                if zv > lb:
                    best_z, best_p, lb = z, lk.in_g(z), zv
                    vs.best = z
            if beta < 1.0:
                # points above beta * v on every support component are outside G
                for i in zip(*np.nonzero(v > ACTIVE_TOL)):
                    w = v.copy()
                    w[i] = beta * v[i]
                    w = lk.tighten(w)
                    if w is not None:
                        wv = lk.bound(w)
                        if wv > lb + delta:
                            vs.add(w, wv)
        vs.iterations = it
        log.append((it, len(vs), max(vs.peek_value(), lb), lb))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "vertices", "upper_bound", "lower_bound"])
            wr.writerows([(a, b, repr(float(c)), repr(float(d))) for a, b, c, d in log])
    if best_z is None:
        if it >= max_iter and status != "exhausted":
            raise IterLimit("polyblock: no feasible point within max_iter", state=None)
        raise Infeasible("polyblock: no point satisfies the floors and error ceilings")
    ub_final = max(vs.peek_value(), lb)
    res = PolyblockResult(best_z.reshape(shape), lb, it, ub_final, best_p.reshape(shape), status, log)
    if status not in ("optimal", "exhausted"):
        raise IterLimit(f"polyblock: gap {ub_final - lb:.4g} after {it} iterations", state=res)
    return res


# ---- recovery --------------------------------------------------------------------

def recover_allocation(y_star, inst: NetworkInstance, real: ChannelRealization) -> AllocationState:
    """Binary assignment s = [y > 0] and the powers solving y (I + noise) = p g on active links."""
    lk = _Links(inst, real)
    shape = (lk.U, inst.frame.F, inst.frame.N)
    y = np.asarray(y_star, dtype=float).reshape(lk.U, lk.C)
    s = (y > ACTIVE_TOL).astype(float)
    p = np.zeros((lk.U, lk.C))
    for c in range(lk.C):
        act = np.nonzero(s[:, c])[0]
        if len(act) == 0:
            continue
        gd = lk.gd[act, c]
        cross = lk.g[lk.ub[act]][:, act, c].T.copy()
        np.fill_diagonal(cross, 0.0)
        theta = y[act, c][:, None] * cross / gd[:, None]
        M = np.eye(len(act)) - theta
        if np.linalg.cond(M) > 1e12:
            raise SingularSystem(f"cell {c}: SINR system is singular")
        p[act, c] = np.linalg.solve(M, y[act, c] * lk.noise / gd)
    return AllocationState(p.reshape(shape), s.reshape(shape), False)
