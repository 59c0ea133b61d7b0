"""Posynomial algebra, AGMA condensation, GP -> log-space convex form, and a solver.

Two representations coexist.  ``Monomial`` / ``Posynomial`` are small
dictionary-based objects used for hand-written programs and tests.
``GpProgram`` stores constraints as stacked term tables (one row per monomial
term, sparse exponent matrix) so that programs with thousands of terms can be
assembled with array operations.

After the substitution x = exp(u) every posynomial constraint becomes
``log sum_k exp(a_k . u + b_k) <= 0`` and every monomial equality becomes an
affine equality.  ``solve_convex`` is a primal-dual interior point method for
that form (linear objective, log-sum-exp inequalities, affine equalities).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DegeneratePoint

VAR_FLOOR = 1e-12


# ---- dictionary-based algebra ------------------------------------------------

@dataclass(frozen=True)
class Monomial:
    coef: float
    exps: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.coef > 0:
            raise ValueError("monomial coefficient must be positive")

    def __call__(self, point: Mapping[str, float]) -> float:
        v = self.coef
        for k, a in self.exps.items():
            v *= float(point[k]) ** a
        return v

    def log_eval(self, point: Mapping[str, float]) -> float:
        return np.log(self.coef) + sum(a * np.log(point[k]) for k, a in self.exps.items())


@dataclass(frozen=True)
class Posynomial:
    terms: tuple[Monomial, ...]

    def __post_init__(self):
        if not self.terms:
            raise ValueError("posynomial needs at least one term")

    @classmethod
    def of(cls, *terms: Monomial) -> "Posynomial":
        return cls(tuple(terms))

    def term_values(self, point: Mapping[str, float]) -> np.ndarray:
        return np.array([t(point) for t in self.terms])

    def __call__(self, point: Mapping[str, float]) -> float:
        return float(self.term_values(point).sum())


def floor_point(point: Mapping[str, float], floor: float = VAR_FLOOR) -> dict[str, float]:
    return {k: max(float(v), floor) for k, v in point.items()}


def agma_weights(pos: Posynomial, point: Mapping[str, float]) -> np.ndarray:
    """w_i = term_i(x0) / pos(x0), aligned with ``pos.terms``."""
    vals = pos.term_values(point)
    if not np.all(np.isfinite(vals)) or (vals <= 0).any():
        raise DegeneratePoint("a term evaluates to zero or non-finite at the expansion point")
    return vals / vals.sum()


def condense(pos: Posynomial, weights: Sequence[float]) -> Monomial:
    """prod_i (term_i / w_i)^w_i: a monomial lower bound of ``pos``, tight where the weights came from."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(pos.terms),) or (w <= 0).any():
        raise DegeneratePoint("weights must be positive and match the terms")
    logc = 0.0
    exps: dict[str, float] = {}
    for wi, t in zip(w, pos.terms):
        logc += wi * (np.log(t.coef) - np.log(wi))
        for k, a in t.exps.items():
            exps[k] = exps.get(k, 0.0) + wi * a
    return Monomial(float(np.exp(logc)), exps)


def condense_arrays(log_terms: np.ndarray, term_exps: np.ndarray, weights: np.ndarray):
    """Array form of ``condense`` for one posynomial.

    ``log_terms`` are log coefficients (T,), ``term_exps`` exponents (T, n) and
    ``weights`` (T,).  Returns (log coefficient, exponent vector).
    """
    w = np.asarray(weights, dtype=float)
    logc = float(np.dot(w, log_terms - np.log(w)))
    return logc, w @ term_exps


# ---- GP and its convex image ---------------------------------------------------

class GpProgram:
    """Minimize a monomial subject to posynomial <= 1, monomial == 1 and a positive box.

    Constraints are appended as term tables: each call adds ``m`` posynomials
    whose terms are rows ``(log_coef, vars, exps, group)`` with ``group`` in
    ``0..m-1``.  Terms may reference up to ``k`` variables (pad with -1).
    """

    def __init__(self):
        self.names: list[str] = []
        self.block: list[int] = []
        self.lower: list[float] = []
        self.upper: list[float] = []
        self.obj_logc = 0.0
        self.obj_vars = np.zeros(0, dtype=int)
        self.obj_exps = np.zeros(0)
        self._t_logc: list[np.ndarray] = []
        self._t_vars: list[np.ndarray] = []
        self._t_exps: list[np.ndarray] = []
        self._t_group: list[np.ndarray] = []
        self.labels: list[str] = []
        self._e_logc: list[float] = []
        self._e_vars: list[np.ndarray] = []
        self._e_exps: list[np.ndarray] = []
        self.eq_labels: list[str] = []

    # variables
    @property
    def n(self) -> int:
        return len(self.names)

    def add_variables(self, prefix: str, count: int, lower, upper, block=-1) -> np.ndarray:
        """``block`` labels variables that only interact within their group (speeds up solves)."""
        start = self.n
        self.block += list(np.broadcast_to(np.asarray(block, dtype=int), (count,)))
        lo = np.broadcast_to(np.asarray(lower, dtype=float), (count,))
        hi = np.broadcast_to(np.asarray(upper, dtype=float), (count,))
        if (lo <= 0).any() or (hi < lo).any() or not np.all(np.isfinite(hi)):
            raise ValueError(f"bad bounds for {prefix}")
        self.names += [f"{prefix}[{i}]" for i in range(count)] if count != 1 or prefix.endswith("]") \
            else [prefix]
        self.lower += list(lo)
        self.upper += list(hi)
        return np.arange(start, start + count)

    def add_variable(self, name: str, lower: float, upper: float, block: int = -1) -> int:
        self.names.append(name)
        self.block.append(int(block))
        self.lower.append(float(lower))
        self.upper.append(float(upper))
        if not (0 < lower <= upper < np.inf):
            raise ValueError(f"bad bounds for {name}")
        return self.n - 1

    def index(self, name: str) -> int:
        return self.names.index(name)

    # objective
    def set_objective(self, logc: float, vars_, exps) -> None:
        self.obj_logc = float(logc)
        self.obj_vars = np.atleast_1d(np.asarray(vars_, dtype=int))
        self.obj_exps = np.atleast_1d(np.asarray(exps, dtype=float))

    def set_objective_monomial(self, mono: Monomial) -> None:
        names = list(mono.exps)
        self.set_objective(np.log(mono.coef), [self.index(k) for k in names],
                           [mono.exps[k] for k in names])

    # constraints
    def add_posynomials(self, log_coef, vars_, exps, group, labels: Sequence[str]) -> None:
        log_coef = np.asarray(log_coef, dtype=float).ravel()
        vars_ = np.asarray(vars_, dtype=int).reshape(len(log_coef), -1)
        exps = np.asarray(exps, dtype=float).reshape(vars_.shape)
        group = np.asarray(group, dtype=int).ravel()
        m = len(labels)
        if m == 0:
            return
        if group.min() < 0 or group.max() >= m or len(np.unique(group)) != m:
            raise ValueError("every constraint needs at least one term")
        if not np.all(np.isfinite(log_coef)):
            raise DegeneratePoint("non-finite term coefficient")
        base = len(self.labels)
        self._t_logc.append(log_coef)
        self._t_vars.append(vars_)
        self._t_exps.append(exps)
        self._t_group.append(group + base)
        self.labels += list(labels)

    def add_posynomial(self, pos: Posynomial, label: str = "") -> None:
        k = max(1, max(len(t.exps) for t in pos.terms))
        V = -np.ones((len(pos.terms), k), dtype=int)
        E = np.zeros((len(pos.terms), k))
        for i, t in enumerate(pos.terms):
            for j, (name, a) in enumerate(t.exps.items()):
                V[i, j] = self.index(name)
                E[i, j] = a
        self.add_posynomials([np.log(t.coef) for t in pos.terms], V, E,
                             np.zeros(len(pos.terms), dtype=int), [label or f"c{len(self.labels)}"])

    def add_monomial_eq(self, logc: float, vars_, exps, label: str = "") -> None:
        self._e_logc.append(float(logc))
        self._e_vars.append(np.atleast_1d(np.asarray(vars_, dtype=int)))
        self._e_exps.append(np.atleast_1d(np.asarray(exps, dtype=float)))
        self.eq_labels.append(label or f"e{len(self.eq_labels)}")

    def add_monomial_eq_obj(self, mono: Monomial, label: str = "") -> None:
        names = list(mono.exps)
        self.add_monomial_eq(np.log(mono.coef), [self.index(k) for k in names],
                             [mono.exps[k] for k in names], label)

    @property
    def num_constraints(self) -> int:
        return len(self.labels)

    def term_table(self):
        """Stacked (log_coef, sparse exponent matrix, group) for all inequality terms."""
        if not self._t_logc:
            return np.zeros(0), sp.csr_matrix((0, self.n)), np.zeros(0, dtype=int)
        logc = np.concatenate(self._t_logc)
        V = _pad_stack(self._t_vars, -1, int)
        E = _pad_stack(self._t_exps, 0.0, float)
        grp = np.concatenate(self._t_group)
        rows = np.repeat(np.arange(len(logc)), V.shape[1])
        keep = V.ravel() >= 0
        A = sp.csr_matrix((E.ravel()[keep], (rows[keep], V.ravel()[keep])), shape=(len(logc), self.n))
        A.sum_duplicates()
        return logc, A, grp

    def evaluate(self, x: np.ndarray) -> dict:
        """Objective and constraint values (posynomials, equality monomials) at positive x."""
        u = np.log(np.maximum(np.asarray(x, dtype=float), 1e-300))
        logc, A, grp = self.term_table()
        vals = np.zeros(self.num_constraints)
        np.add.at(vals, grp, np.exp(A @ u + logc))
        eqs = np.array([np.exp(c + np.dot(e, u[v])) for c, v, e in
                        zip(self._e_logc, self._e_vars, self._e_exps)])
        obj = float(np.exp(self.obj_logc + np.dot(self.obj_exps, u[self.obj_vars])))
        return {"objective": obj, "posynomials": vals, "equalities": eqs}

    def dump(self) -> str:
        """Readable text listing, stable across runs (for regression snapshots)."""
        lines = [f"variables {self.n}"]
        for nm, lo, hi in zip(self.names, self.lower, self.upper):
            lines.append(f"  {nm} in [{lo:.6g}, {hi:.6g}]")
        ob = " ".join(f"{self.names[v]}^{a:.6g}" for v, a in zip(self.obj_vars, self.obj_exps))
        lines.append(f"minimize {np.exp(self.obj_logc):.6g} {ob}".rstrip())
        logc, A, grp = self.term_table()
        order = np.argsort(grp, kind="stable")
        A = A.tocsr()
        cur = -1
        for t in order:
            if grp[t] != cur:
                cur = grp[t]
                lines.append(f"posynomial {self.labels[cur]} <= 1")
            row = A.getrow(t)
            mono = " ".join(f"{self.names[j]}^{a:.6g}" for j, a in zip(row.indices, row.data))
            lines.append(f"  + {np.exp(logc[t]):.6g} {mono}".rstrip())
        for lab, c, v, e in zip(self.eq_labels, self._e_logc, self._e_vars, self._e_exps):
            mono = " ".join(f"{self.names[j]}^{a:.6g}" for j, a in zip(v, e))
            lines.append(f"monomial {lab} == 1: {np.exp(c):.6g} {mono}")
        return "\n".join(lines) + "\n"


def _pad_stack(arrs: list[np.ndarray], fill, dtype) -> np.ndarray:
    k = max(a.shape[1] for a in arrs)
    out = []
    for a in arrs:
        if a.shape[1] < k:
            pad = np.full((a.shape[0], k - a.shape[1]), fill, dtype=dtype)
            a = np.hstack([a, pad])
        out.append(a)
    return np.vstack(out)


@dataclass
class ConvexProgram:
    """minimize c.u  s.t.  log sum_{k in i} exp(A_k u + b_k) <= 0,  E u = h.

    Terms are sorted by constraint so each constraint is a contiguous slice
    ``ptr[i]:ptr[i+1]``.  Variable bounds are included as single-term rows.
    """
    c: np.ndarray
    c0: float
    A: sp.csr_matrix
    b: np.ndarray
    ptr: np.ndarray
    E: np.ndarray
    h: np.ndarray
    names: list[str]
    labels: list[str]
    block: Optional[np.ndarray] = None   # per-variable block id for structured solves (-1 = dense border)

    @property
    def n(self) -> int:
        return len(self.c)

    @property
    def m(self) -> int:
        return len(self.ptr) - 1

    def constraint_values(self, u: np.ndarray) -> np.ndarray:
        z = self.A @ u + self.b
        zmax = np.maximum.reduceat(z, self.ptr[:-1])
        cnt = np.diff(self.ptr)
        s = np.add.reduceat(np.exp(z - np.repeat(zmax, cnt)), self.ptr[:-1])
        return zmax + np.log(s)

    def to_gp_point(self, u: np.ndarray) -> np.ndarray:
        return np.exp(u)


def gp_to_convex(gp: GpProgram) -> ConvexProgram:
    n = gp.n
    logc, A, grp = gp.term_table()
    lo = np.log(np.asarray(gp.lower))
    hi = np.log(np.asarray(gp.upper))
    # box rows: lo - u <= 0 and u - hi <= 0 (skip fixed variables' duplicates)
    eye = sp.identity(n, format="csr")
    A_all = sp.vstack([A, -eye, eye], format="csr")
    b_all = np.concatenate([logc, lo, -hi])
    m0 = gp.num_constraints
    grp_all = np.concatenate([grp, m0 + np.arange(n), m0 + n + np.arange(n)])
    order = np.argsort(grp_all, kind="stable")
    A_all = A_all[order]
    b_all = b_all[order]
    counts = np.bincount(grp_all, minlength=m0 + 2 * n)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    c = np.zeros(n)
    np.add.at(c, gp.obj_vars, gp.obj_exps)
    E = np.zeros((len(gp._e_logc), n))
    for i, (v, e) in enumerate(zip(gp._e_vars, gp._e_exps)):
        np.add.at(E[i], v, e)
    h = -np.asarray(gp._e_logc, dtype=float)
    labels = list(gp.labels) + [f"lower {nm}" for nm in gp.names] + [f"upper {nm}" for nm in gp.names]
    block = np.asarray(gp.block, dtype=int) if any(b >= 0 for b in gp.block) else None
    return ConvexProgram(c, gp.obj_logc, A_all, b_all, ptr, E, h, list(gp.names), labels, block)


# ---- solver ------------------------------------------------------------------

@dataclass
class ConvexSolution:
    status: str                 # "Optimal" | "Infeasible" | "IterLimit"
    u: np.ndarray
    value: float
    kkt_residual: float
    gap: float
    iterations: int
    lam: Optional[np.ndarray] = None

    @property
    def x(self) -> np.ndarray:
        return np.exp(self.u)




class _Sparse:
    """CSR product kernel in plain numpy; scipy's per-call overhead dominates at these sizes."""

    def __init__(self, M):
        M = sp.csr_matrix(M)
        M.sum_duplicates()
        self.shape = M.shape
        self.cols = M.indices
        self.data = M.data
        cnt = np.diff(M.indptr)
        self.nz = np.nonzero(cnt)[0]
        self.starts = M.indptr[:-1][self.nz]

    def __matmul__(self, X):
        out = np.zeros((self.shape[0],) + X.shape[1:])
        if len(self.data):
            d = self.data if X.ndim == 1 else self.data[:, None]
            out[self.nz] = np.add.reduceat(d * X[self.cols], self.starts, axis=0)
        return out


class _Oracle:
    """Values of the stacked log-sum-exp constraints and the products with their Jacobian."""

    def __init__(self, A: sp.csr_matrix, b: np.ndarray, ptr: np.ndarray):
        self.A = A.tocsr()
        self._A = _Sparse(self.A)
        self._AT = _Sparse(self.A.T)
        self.b = b
        self.ptr = ptr
        self.cnt = np.diff(ptr)
        self.T = A.shape[0]
        self.m = len(ptr) - 1
        self.rowid = np.repeat(np.arange(self.m), self.cnt)
        self.multi = self.cnt > 1

    def values(self, u):
        z = self._A @ u + self.b
        zmax = np.maximum.reduceat(z, self.ptr[:-1])
        e = np.exp(z - zmax[self.rowid])
        s = np.add.reduceat(e, self.ptr[:-1])
        return zmax + np.log(s), e / s[self.rowid]

    def jt(self, w, v):
        """J^T v for row weights v."""
        return self._AT @ (v[self.rowid] * w)

    def jv(self, w, d):
        """J d."""
        return np.add.reduceat(w * (self._A @ d), self.ptr[:-1])


class _Newton:
    """Structured solves with the Newton matrix H = sum_t lw_t a_t a_t^T + sum_i coef_i J_i J_i^T.

    Variables with a block id >= 0 form independent dense blocks.  Rows whose
    block variables span more than one block enter through a low-rank
    (Woodbury) correction, and variables with id -1 are a dense border
    eliminated by a Schur complement.  Terms of multi-term rows must keep
    their block variables inside one block; otherwise every variable is
    treated as border, which is the plain dense solve.
    """

    def __init__(self, orc: _Oracle, block: Optional[np.ndarray]):
        n = orc.A.shape[1]
        block = -np.ones(n, dtype=int) if block is None else np.asarray(block, dtype=int)
        self.orc = orc
        self.eq = None
        if not self._setup(block):
            self._setup(-np.ones(n, dtype=int))

    def _setup(self, block) -> bool:
        orc = self.orc
        A, T, m = orc.A, orc.T, orc.m
        self.bvars = np.nonzero(block >= 0)[0]
        self.gvars = np.nonzero(block < 0)[0]
        self.A_b = A[:, self.bvars].tocsr()
        self.A_g = A[:, self.gvars].tocsr()
        self.Ag_d = self.A_g.toarray()
        self._AbT = _Sparse(self.A_b.T)
        self.nb, self.ng = len(self.bvars), len(self.gvars)
        self.K = 0
        self.r = 0
        if self.nb == 0:
            return True
        bb = block[self.bvars]
        K = int(bb.max()) + 1
        sizes = np.bincount(bb, minlength=K)
        starts = np.concatenate([[0], np.cumsum(sizes)])
        order = np.argsort(bb, kind="stable")
        pos = np.empty(self.nb, dtype=int)
        pos[order] = np.arange(self.nb) - starts[bb[order]]
        mm = int(sizes.max())
        coo = self.A_b.tocoo()
        t, v, a = coo.row, coo.col, coo.data
        tb = bb[v]
        tmin = np.full(T, K)
        tmax = np.full(T, -1)
        np.minimum.at(tmin, t, tb)
        np.maximum.at(tmax, t, tb)
        has = tmax >= 0
        multi_t = orc.multi[orc.rowid]
        if np.any(multi_t & has & (tmin != tmax)):
            return False
        # row-level block span
        rmin = np.full(m, K)
        rmax = np.full(m, -1)
        np.minimum.at(rmin, orc.rowid[has], tmin[has])
        np.maximum.at(rmax, orc.rowid[has], tmax[has])
        local = (rmax >= 0) & (rmin == rmax)
        self.crows = np.nonzero((rmax >= 0) & (rmin != rmax))[0]
        self.r = len(self.crows)
        self.K, self.mm = K, mm
        self.vflat = bb * mm + pos
        pad = np.ones(K * mm, dtype=bool)
        pad[self.vflat] = False
        self.pad = np.nonzero(pad)[0]
        # term Hessians of multi-term rows
        sel = multi_t & has
        terms = np.nonzero(sel)[0]
        tk = tmin[terms]
        ordt = np.argsort(tk, kind="stable")
        cntk = np.bincount(tk, minlength=K)
        Tmax = max(int(cntk.max()) if len(terms) else 0, 1)
        lt = np.empty(len(terms), dtype=int)
        st = np.concatenate([[0], np.cumsum(cntk)])
        lt[ordt] = np.arange(len(terms)) - st[tk[ordt]]
        self.tidx = np.full((K, Tmax), T)
        self.tidx[tk, lt] = terms
        loc_t = np.full(T, -1)
        loc_t[terms] = lt
        keep = sel[t]
        Tb = np.zeros((K, Tmax, mm))
        np.add.at(Tb, (tb[keep], loc_t[t[keep]], pos[v[keep]]), a[keep])
        self.Tb = Tb
        # Jacobian rows of local rows, laid out per block
        lrows = np.nonzero(local)[0]
        rk = rmin[lrows]
        cntr = np.bincount(rk, minlength=K)
        Rmax = max(int(cntr.max()) if len(lrows) else 0, 1)
        ordr = np.argsort(rk, kind="stable")
        sr = np.concatenate([[0], np.cumsum(cntr)])
        lr = np.empty(len(lrows), dtype=int)
        lr[ordr] = np.arange(len(lrows)) - sr[rk[ordr]]
        self.ridx = np.full((K, Rmax), m)
        self.ridx[rk, lr] = lrows
        row_lr = np.full(m, -1)
        row_lr[lrows] = lr
        rows_nz = orc.rowid[t]
        keep = local[rows_nz]
        self.fj = (tb[keep] * Rmax + row_lr[rows_nz[keep]]) * mm + pos[v[keep]]
        self.fj_t = t[keep]
        self.fj_a = a[keep]
        self.Rmax = Rmax
        # coupling rows
        if self.r:
            cterms = np.concatenate([np.arange(orc.ptr[i], orc.ptr[i + 1]) for i in self.crows])
            self.c_terms = cterms
            self.c_ptr = np.concatenate([[0], np.cumsum(orc.cnt[self.crows])])
            self.Ac_d = self.A_b[cterms].toarray()
        return True

    def _to_blocks(self, Rb):
        k = Rb.shape[1]
        X = np.zeros((self.K * self.mm, k))
        X[self.vflat] = Rb
        return X.reshape(self.K, self.mm, k)

    def _blocksolve(self, Rb):
        X = self._to_blocks(Rb)
        Y = self.Dinv @ X
        return Y.reshape(self.K * self.mm, -1)[self.vflat]

    def factor(self, w, lw, coef):
        orc = self.orc
        self._w, self._lw, self._coef = w, lw, coef
        self.eq = None
        if self.K:
            lwp = np.append(lw, 0.0)[self.tidx]
            Tb = self.Tb
            D = np.matmul((Tb * lwp[..., None]).transpose(0, 2, 1), Tb)
            Jv = np.bincount(self.fj, weights=w[self.fj_t] * self.fj_a,
                             minlength=self.K * self.Rmax * self.mm).reshape(self.K, self.Rmax, self.mm)
            cp = np.append(coef, 0.0)[self.ridx]
            D += np.matmul((Jv * cp[..., None]).transpose(0, 2, 1), Jv)
            D.reshape(self.K * self.mm, self.mm)[self.pad, self.pad % self.mm] = 1.0
            self.Dinv = np.linalg.inv(D)
            if self.r:
                L = np.add.reduceat(w[self.c_terms, None] * self.Ac_d, self.c_ptr[:-1], axis=0)
                self.L = L
                self.C = coef[self.crows]
                self.DL = self._blocksolve(L.T)
                M = np.eye(self.r) + self.C[:, None] * (L @ self.DL)
                self.M_lu = sla.lu_factor(M, check_finite=False)
        if self.ng:
            # H[:, g] = A^T (diag(lw) A_g + W^T diag(coef) W A_g)
            Ag = self.Ag_d
            Jg = np.add.reduceat(w[:, None] * Ag, orc.ptr[:-1], axis=0)
            G = lw[:, None] * Ag + w[:, None] * (coef[:, None] * Jg)[orc.rowid]
            Hgg = Ag.T @ G
            if self.nb:
                self.Hbg = self._AbT @ G
                self.X2 = self._solve_bb(self.Hbg)
                Hgg = Hgg - self.Hbg.T @ self.X2
            self.S_lu = sla.lu_factor(Hgg, check_finite=False)

    def _solve_bb(self, Rb):
        Z = self._blocksolve(Rb)
        if self.r:
            Z = Z - self.DL @ sla.lu_solve(self.M_lu, self.C[:, None] * (self.L @ Z), check_finite=False)
        return Z

    def matvec(self, X):
        """H X using the sparse factors (for iterative refinement)."""
        orc = self.orc
        AX = orc._A @ X
        w = self._w[:, None]
        JX = np.add.reduceat(w * AX, orc.ptr[:-1], axis=0)
        Y = self._lw[:, None] * AX + w * (self._coef[:, None] * JX)[orc.rowid]
        return orc._AT @ Y

    def solve(self, R, refine: int = 2):
        R = np.asarray(R, dtype=float)
        vec = R.ndim == 1
        if vec:
            R = R[:, None]
        X = self._solve_once(R)
        if self.nb and (self.r or self.ng):
            scale = np.abs(R).max() + 1e-300
            for _ in range(refine):
                res = R - self.matvec(X)
                if np.abs(res).max() <= 1e-9 * scale:
                    break
                X = X + self._solve_once(res)
        return X[:, 0] if vec else X

    def _solve_once(self, R):
        out = np.zeros_like(R)
        if self.ng == 0:
            out[self.bvars] = self._solve_bb(R[self.bvars])
        else:
            Rg = R[self.gvars]
            if self.nb:
                X1 = self._solve_bb(R[self.bvars])
                ug = sla.lu_solve(self.S_lu, Rg - self.Hbg.T @ X1, check_finite=False)
                out[self.bvars] = X1 - self.X2 @ ug
            else:
                ug = sla.lu_solve(self.S_lu, Rg, check_finite=False)
            out[self.gvars] = ug
        return out


def _kkt_solve(nt: _Newton, E, r1, r2):
    """Solve [H E^T; E 0] [du; dnu] = [r1; r2] with H given by ``nt``."""
    q = E.shape[0]
    if q == 0:
        return nt.solve(r1), np.zeros(0)
    if nt.eq is None:
        # H^-1 E^T and the Schur complement are reused by both directions of an iteration
        X2 = nt.solve(E.T)
        nt.eq = (X2, E @ X2)
    X2, S = nt.eq
    x1 = nt.solve(r1)
    try:
        dnu = np.linalg.solve(S, E @ x1 - r2)
    except np.linalg.LinAlgError:
        dnu = np.linalg.lstsq(S, E @ x1 - r2, rcond=None)[0]
    return x1 - X2 @ dnu, dnu


def solve_convex(cp: ConvexProgram, tol: float = 1e-8, max_iter: int = 200,
                 u0: Optional[np.ndarray] = None, feas_tol: float = 1e-9,
                 margin: float = 0.0) -> ConvexSolution:
    """Primal-dual interior point on the slack form f(u) + s = 0, s > 0.

    The start ``u0`` (default: box centre) need not be feasible.  When the
    main run fails to reach primal feasibility a phase I problem decides
    between Infeasible and IterLimit.  ``margin`` tightens every inequality
    to f(u) <= -margin so that a slightly inexact solution stays feasible
    for the original rows.
    """
    if u0 is None:
        u0 = _box_centre(cp)
    u0 = np.asarray(u0, dtype=float).copy()
    if margin:
        cp = replace(cp, b=cp.b + margin)
    orc = _Oracle(cp.A, cp.b, cp.ptr)
    nt = _Newton(orc, cp.block)
    res = _pdip(orc, nt, cp.c, cp.E, cp.h, u0, tol, max_iter, feas_tol)
    res.value = float(cp.c @ res.u + cp.c0)
    if res.status != "Optimal" and res.kkt_residual > _FEAS_PHASE_ONE:
        ph = _phase_one(cp, res.u, max_iter)
        res.iterations += ph.iterations
        if ph.status == "Infeasible":
            res.status = "Infeasible"
            res.value = np.inf
    return res


# primal residual below which a stalled run still counts as feasible
_FEAS_ACCEPT = 1e-6
# larger residuals after a failed run trigger the phase I infeasibility test
_FEAS_PHASE_ONE = 1e-4
_MERIT_SLACK = 1e4


def _box_centre(cp: ConvexProgram) -> np.ndarray:
    n = cp.n
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    A = cp.A.tocsr()
    single = np.nonzero(np.diff(cp.ptr) == 1)[0]
    rows = cp.ptr[single]
    sub = A[rows]
    one = np.diff(sub.indptr) == 1
    for t, k in zip(rows[one], np.nonzero(one)[0]):
        j, a = sub.indices[sub.indptr[k]], sub.data[sub.indptr[k]]
        if a == -1.0:
            lo[j] = max(lo[j], cp.b[t])
        elif a == 1.0:
            hi[j] = min(hi[j], -cp.b[t])
    lo = np.where(np.isfinite(lo), lo, hi - 1.0)
    hi = np.where(np.isfinite(hi), hi, lo + 1.0)
    return 0.5 * (lo + hi)


def _phase_one(cp: ConvexProgram, u0, max_iter) -> ConvexSolution:
    """minimize sigma s.t. f_i(u) <= sigma, sigma >= -1; Infeasible when sigma* >= 0."""
    n = cp.n
    f0, _ = _Oracle(cp.A, cp.b, cp.ptr).values(u0)
    T = cp.A.shape[0]
    col = sp.csr_matrix(-np.ones((T, 1)))
    A1 = sp.vstack([sp.hstack([cp.A, col]), sp.csr_matrix(([-1.0], ([0], [n])), shape=(1, n + 1))],
                   format="csr")
    b1 = np.concatenate([cp.b, [-1.0]])
    ptr1 = np.concatenate([cp.ptr, [cp.ptr[-1] + 1]])
    orc = _Oracle(A1, b1, ptr1)
    block = None if cp.block is None else np.concatenate([cp.block, [-1]])
    nt = _Newton(orc, block)
    c = np.zeros(n + 1)
    c[-1] = 1.0
    E = np.hstack([cp.E, np.zeros((cp.E.shape[0], 1))])
    v0 = np.concatenate([u0, [max(f0.max(), 0.0) + 1.0]])
    res = _pdip(orc, nt, c, E, cp.h, v0, 1e-7, max_iter, 1e-9, stop_below=-1e-3)
    u = res.u[:-1]
    f, _ = _Oracle(cp.A, cp.b, cp.ptr).values(u)
    eq = np.abs(cp.E @ u - cp.h).max(initial=0.0)
    ok = f.max() < 0 and eq < 1e-7
    return ConvexSolution("Optimal" if ok else "Infeasible", u, res.u[-1], res.kkt_residual,
                          res.gap, res.iterations)


def _pdip(orc: _Oracle, nt: _Newton, c, E, h, u0, tol, max_iter, feas_tol,
          stop_below=None) -> ConvexSolution:
    """Mehrotra predictor-corrector for min c.u s.t. f(u) + s = 0, s > 0, E u = h.

    ``kkt_residual`` of the result is the final primal residual (max over
    f + s and E u - h).  ``stop_below`` ends the run as soon as the last
    variable is below it at a primal-feasible point (phase I use).
    """
    m = orc.m
    q = E.shape[0]
    multi = orc.multi
    # work with a unit-scale objective so primal and dual residuals are comparable
    cn = max(1.0, float(np.abs(c).max()))
    c_in = c
    c = c / cn
    u = u0.copy()
    f, w = orc.values(u)
    s = np.maximum(-f, 1.0)
    lam = 1.0 / s
    nu = np.zeros(q)

    def residuals(u, s, lam, nu, f, w):
        rd = c + orc.jt(w, lam) + (E.T @ nu if q else 0.0)
        rp = E @ u - h if q else np.zeros(0)
        return rd, f + s, rp

    def max_step(s, ds, lam, dlam):
        a = 1.0
        for v, dv in ((s, ds), (lam, dlam)):
            neg = dv < 0
            if neg.any():
                a = min(a, float(np.min(-v[neg] / dv[neg])))
        return a

    status = "IterLimit"
    it = stall = 0
    pres = np.inf
    gap = float(s @ lam)
    while True:
        rd, rf, rp = residuals(u, s, lam, nu, f, w)
        gap = float(s @ lam) * cn
        pres = max(float(np.abs(rf).max()), float(np.abs(rp).max(initial=0.0)))
        dres = float(np.abs(rd).max())
        if stop_below is not None and u[-1] < stop_below and f.max() < 0 and \
                np.abs(rp).max(initial=0.0) <= 1e-10:
            status = "Optimal"
            break
        if dres <= max(tol, 1e-9):
            # the slacks may lag behind a point that is already feasible; test u itself
            viol = max(float(f.max()), float(np.abs(rp).max(initial=0.0)))
            if (gap <= tol and pres <= feas_tol) or \
                    (viol <= feas_tol and float(lam @ np.abs(f)) * cn <= tol):
                status = "Optimal"
                break
        if stall >= 5 or it >= max_iter:
            # accept a stalled point when it is already accurate enough for practical use
            if gap <= max(100 * tol, 1e-6) and dres <= 1e-5 and pres <= _FEAS_ACCEPT:
                status = "Optimal"
            break
        it += 1
        mu = gap / (cn * m)
        nt.factor(w, lam[orc.rowid] * w * multi[orc.rowid], lam / s - lam * multi)

        def direction(rc):
            rhs = -rd - orc.jt(w, (lam * rf - rc) / s)
            du, dnu = _kkt_solve(nt, E, rhs, -rp)
            ds = -rf - orc.jv(w, du)
            return du, ds, (-rc - lam * ds) / s, dnu

        du, ds, dlam, dnu = direction(s * lam)
        a = max_step(s, ds, lam, dlam)
        mu_aff = float((s + a * ds) @ (lam + a * dlam)) / m
        sigma = min(1.0, (mu_aff / mu) ** 3)
        du, ds, dlam, dnu = direction(s * lam + ds * dlam - sigma * mu)
        a = min(1.0, 0.99 * max_step(s, ds, lam, dlam))
        a_max = a
        r0 = np.sqrt(rd @ rd + rf @ rf + rp @ rp)
        for _ in range(40):
            un = u + a * du
            fn, wn = orc.values(un)
            sn, lamn = s + a * ds, lam + a * dlam
            nun = nu + a * dnu if q else nu
            rdn, rfn, rpn = residuals(un, sn, lamn, nun, fn, wn)
            r1 = np.sqrt(rdn @ rdn + rfn @ rfn + rpn @ rpn)
            if np.all(np.isfinite(fn)) and (r1 <= (1 - 0.01 * a) * r0 + _MERIT_SLACK * mu or
                                            (r1 <= r0 * (1 + 1e-4) and sn @ lamn * cn < gap)):
                break
            a *= 0.5
        stall = stall + 1 if a < 1e-3 else 0
        u, s, lam, nu, f, w = un, sn, lamn, nun, fn, wn
    return ConvexSolution(status, u, float(c_in @ u), pres, gap, it, lam * cn)
