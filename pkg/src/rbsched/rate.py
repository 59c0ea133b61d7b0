"""SINR, Shannon / finite-blocklength rates, the piecewise error model and QoS checks.

Allocation tensors are indexed (u, f, n) over the global user list; the
serving BS of user u is ``inst.user_bs[u]``.  Interference on user u comes
from every other BS transmitting on the same small cell, weighted by that
BS's assignment indicators (relaxed values act as fractional activity).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .channel import ChannelRealization
from .errors import DimensionMismatch
from .model import NetworkInstance, Scenario, ServiceClass

RATE_RTOL = 1e-6
PROB_ATOL = 1e-9
POWER_RTOL = 1e-6


@dataclass
class AllocationState:
    p: np.ndarray              # (U, F, N) transmit powers
    s: np.ndarray              # (U, F, N) assignment indicators in [0, 1]
    relaxed: bool = False

    @classmethod
    def zeros(cls, inst: NetworkInstance) -> "AllocationState":
        shp = (inst.U, inst.frame.F, inst.frame.N)
        return cls(np.zeros(shp), np.zeros(shp), False)

    def copy(self) -> "AllocationState":
        return AllocationState(self.p.copy(), self.s.copy(), self.relaxed)


def _check_dims(state: AllocationState, real: ChannelRealization, inst: NetworkInstance) -> None:
    shp = (inst.U, inst.frame.F, inst.frame.N)
    if state.p.shape != shp or state.s.shape != shp:
        raise DimensionMismatch(f"allocation shape {state.p.shape}/{state.s.shape}, expected {shp}")
    if real.g.shape != (inst.B,) + shp:
        raise DimensionMismatch(f"gain shape {real.g.shape}, expected {(inst.B,) + shp}")


def interference(state: AllocationState, real: ChannelRealization, inst: NetworkInstance) -> np.ndarray:
    """I[u, f, n] = sum over other BSs i and their users j of s_j p_j g[i, u]."""
    _check_dims(state, real, inst)
    ub = inst.user_bs
    tx = np.zeros((inst.B,) + state.p.shape[1:])
    np.add.at(tx, ub, state.s * state.p)            # per-BS radiated power on each cell
    total = np.einsum("bfn,bufn->ufn", tx, real.g)
    own = tx[ub] * real.g[ub, np.arange(inst.U)]
    return total - own


def sinr(state: AllocationState, real: ChannelRealization, inst: NetworkInstance) -> np.ndarray:
    """gamma[u, f, n] = p g_direct / (I + vartheta N0)."""
    I = interference(state, real, inst)
    gd = real.g[inst.user_bs, np.arange(inst.U)]
    return state.p * gd / (I + inst.noise)


def link_sinr(state, real, inst, k: int, f: int, n: int) -> float:
    return float(sinr(state, real, inst)[k, f, n])


def shannon_rate_from_sinr(gamma, psi: float) -> np.ndarray:
    return psi * np.log2(1.0 + np.asarray(gamma, dtype=float))


def shannon_rate(state, real, inst) -> np.ndarray:
    """Per-link rate chi*vartheta*log2(1+gamma) in bits per small RB."""
    return shannon_rate_from_sinr(sinr(state, real, inst), inst.frame.psi)


def user_rates(state, real, inst) -> np.ndarray:
    return (state.s * shannon_rate(state, real, inst)).sum(axis=(1, 2))


def sum_rate(state, real, inst) -> float:
    return float((state.s * shannon_rate(state, real, inst)).sum())


# ---- piecewise error model --------------------------------------------------

def q_approx_constants(kappa: float, psi: float) -> tuple[float, float, float, float]:
    """(varpi, theta, eta1, eta2) of the linearised Q-function around 2^(kappa/psi)-1."""
    phi = kappa / psi
    varpi = 1.0 / (2.0 * np.pi * np.sqrt(2.0 ** (2.0 * phi) - 1.0))
    theta = 2.0 ** phi - 1.0
    half = 1.0 / (2.0 * varpi * np.sqrt(psi))
    return varpi, theta, theta - half, theta + half


def q_approx_error(gamma, kappa: float, psi: float):
    varpi, theta, eta1, eta2 = q_approx_constants(kappa, psi)
    gamma = np.asarray(gamma, dtype=float)
    lin = 0.5 - varpi * np.sqrt(psi) * (gamma - theta)
    out = np.where(gamma <= eta1, 1.0, np.where(gamma >= eta2, 0.0, lin))
    return out if out.ndim else float(out)


def sinr_threshold(eps: float, kappa: float, psi: float) -> float:
    """Smallest gamma with q_approx_error(gamma) <= eps (0 if eps >= 1).

    The error model is non-increasing in gamma, so the reliability constraint
    is exactly the SINR floor gamma >= sinr_threshold.
    """
    if eps >= 1.0:
        return 0.0
    varpi, theta, eta1, eta2 = q_approx_constants(kappa, psi)
    return max(theta + (0.5 - eps) / (varpi * np.sqrt(psi)), 0.0)


def user_sinr_thresholds(inst: NetworkInstance) -> np.ndarray:
    """Per-user SINR floor implied by eps_max (0 for users without an error ceiling)."""
    psi = inst.frame.psi
    return np.array([sinr_threshold(u.eps_max, u.payload_bits, psi)
                     if u.service != ServiceClass.EMBB else 0.0 for u in inst.users])


def urllc_fbl_rate_from_sinr(gamma, eps: float, chi: float, vartheta: float,
                             dispersion: str = "bandwidth"):
    """Normal-approximation finite-blocklength rate in bits per small RB, floored at 0."""
    gamma = np.asarray(gamma, dtype=float)
    v = 1.0 - 1.0 / (1.0 + gamma) ** 2
    div = vartheta if dispersion == "bandwidth" else chi * vartheta
    qinv = norm.isf(eps)
    r = chi * vartheta / np.log(2.0) * (np.log1p(gamma) - np.sqrt(v / div) * qinv)
    r = np.maximum(r, 0.0)
    return r if r.ndim else float(r)


def urllc_fbl_rate(state, real, inst, k: int, f: int, n: int, eps: float) -> float:
    g = link_sinr(state, real, inst, k, f, n)
    fr = inst.frame
    return urllc_fbl_rate_from_sinr(g, eps, fr.chi, fr.vartheta, inst.dispersion)


# ---- QoS report ------------------------------------------------------------

def column_residual(s_user: np.ndarray) -> float:
    """sum_n (sum_f s[f,n]) * (sum_f sum_{n' != n} s[f,n']) for one user's (F, N) slice."""
    a = s_user.sum(axis=0)
    return float((a * (a.sum() - a)).sum())


@dataclass
class QosReport:
    rates: np.ndarray                  # (U,) achieved bits per frame
    floors: np.ndarray                 # (U,) rate floors (0 when none)
    services: list[ServiceClass]
    floor_residual: np.ndarray         # (U,) floor - rate (<= 0 is satisfied)
    error_residual: np.ndarray         # (U, F, N) Gamma(gamma) - eps on active cells, -inf elsewhere
    column_residual: np.ndarray        # (U,) URLLC single-column residual (D-RBS only)
    power_residual: np.ndarray         # (B,) sum s p - P_max
    exclusivity_residual: np.ndarray   # (B, F, N) sum_k s - 1
    feasible: bool
    sum_rate: float
    violations: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for u, r in enumerate(self.floor_residual):
            if self.floors[u] > 0:
                out.append(("rate_floor", f"u{u}", float(r)))
        for u, f, n in zip(*np.nonzero(np.isfinite(self.error_residual))):
            out.append(("error_ceiling", f"u{u}/f{f}/n{n}", float(self.error_residual[u, f, n])))
        for u, r in enumerate(self.column_residual):
            if self.services[u] == ServiceClass.URLLC:
                out.append(("single_column", f"u{u}", float(r)))
        for b, r in enumerate(self.power_residual):
            out.append(("power_budget", f"b{b}", float(r)))
        for b, f, n in np.ndindex(*self.exclusivity_residual.shape):
            out.append(("exclusivity", f"b{b}/f{f}/n{n}", float(self.exclusivity_residual[b, f, n])))
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["constraint", "index", "residual"])
            for row in self.rows():
                w.writerow([row[0], row[1], repr(row[2])])


def qos_report(state: AllocationState, real: ChannelRealization, inst: NetworkInstance,
               active_tol: float = 1e-9) -> QosReport:
    _check_dims(state, real, inst)
    fr = inst.frame
    gam = sinr(state, real, inst)
    rates = (state.s * shannon_rate_from_sinr(gam, fr.psi)).sum(axis=(1, 2))
    floors = inst.rate_floors
    services = [u.service for u in inst.users]
    floor_res = floors - rates
    err = np.full(state.s.shape, -np.inf)
    col = np.zeros(inst.U)
    for k, u in enumerate(inst.users):
        if u.service != ServiceClass.EMBB:
            act = state.s[k] > active_tol
            if act.any():
                e = q_approx_error(gam[k], u.payload_bits, fr.psi)
                err[k][act] = np.asarray(e)[act] - u.eps_max
        if u.service == ServiceClass.URLLC and fr.scenario == Scenario.DYNAMIC:
            col[k] = column_residual(state.s[k])
    ub = inst.user_bs
    used = np.zeros(inst.B)
    np.add.at(used, ub, (state.s * state.p).sum(axis=(1, 2)))
    pres = used - inst.p_max
    excl = np.zeros((inst.B, fr.F, fr.N))
    np.add.at(excl, ub, state.s)
    excl -= 1.0

    viol = []
    bad = floor_res > RATE_RTOL * np.maximum(floors, 1.0)
    bad &= floors > 0
    viol += [f"rate_floor u{u}" for u in np.nonzero(bad)[0]]
    viol += [f"error_ceiling u{u}" for u in np.unique(np.nonzero(err > PROB_ATOL)[0])]
    viol += [f"single_column u{u}" for u in np.nonzero(col > 1e-9)[0]]
    viol += [f"power_budget b{b}" for b in np.nonzero(pres > POWER_RTOL * inst.p_max)[0]]
    viol += [f"exclusivity b{b}" for b in np.unique(np.nonzero(excl > 1e-9)[0])]
    if (state.p < 0).any() or (state.s < -1e-12).any() or (state.s > 1 + 1e-12).any():
        viol.append("domain")
    total = float((state.s * shannon_rate_from_sinr(gam, fr.psi)).sum())
    return QosReport(rates, floors, services, floor_res, err, col, pres, excl,
                     not viol, total, viol)


def outage_probabilities(trials: Sequence[QosReport]) -> tuple[float, float]:
    """Fraction of (user, trial) pairs whose rate falls below the floor, for eMBB and mMTC."""
    if not trials:
        raise ValueError("need at least one trial")
    out = []
    for svc in (ServiceClass.EMBB, ServiceClass.MMTC):
        hit = tot = 0
        for rep in trials:
            m = np.array([s == svc for s in rep.services])
            if not m.any():
                continue
            below = rep.rates[m] < rep.floors[m] * (1.0 - RATE_RTOL)
            hit += int(below.sum())
            tot += int(m.sum())
        out.append(hit / tot if tot else 0.0)
    return out[0], out[1]
