"""Network topology, service classes, QoS targets and frame structures.

Users are indexed globally (0..U-1); every user belongs to exactly one base
station.  The small-RB lattice has F subbands and N slots and a cell of the
lattice is flattened as ``c = f * N + n``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import BadTiling, NonIntegerGrid

_GRID_RTOL = 1e-9


class Scenario(str, enum.Enum):
    DYNAMIC = "dynamic"   # D-RBS: every small cell is an assignment unit
    STATIC = "static"     # S-RBS: fixed composite blocks


class ServiceClass(str, enum.Enum):
    EMBB = "embb"
    MMTC = "mmtc"
    URLLC = "urllc"


@dataclass(frozen=True)
class StaticBlock:
    """Axis-aligned rectangle of small cells: subbands [f0, f0+nf), slots [n0, n0+nn)."""
    f0: int
    nf: int
    n0: int
    nn: int

    @property
    def size(self) -> int:
        return self.nf * self.nn

    def cells(self, N: int) -> list[int]:
        return [f * N + n for f in range(self.f0, self.f0 + self.nf)
                for n in range(self.n0, self.n0 + self.nn)]


@dataclass(frozen=True)
class FrameGrid:
    T: float
    W: float
    chi: float
    vartheta: float
    N: int
    F: int
    scenario: Scenario = Scenario.DYNAMIC
    tiling: tuple[StaticBlock, ...] = ()

    @property
    def num_cells(self) -> int:
        return self.F * self.N

    @property
    def psi(self) -> float:
        """Symbols per small RB (blocklength chi * vartheta)."""
        return self.chi * self.vartheta

    @property
    def blocks(self) -> tuple[StaticBlock, ...]:
        """Assignment units; for D-RBS one unit block per small cell."""
        if self.scenario == Scenario.STATIC:
            return self.tiling
        return unit_tiling(self.F, self.N)

    @property
    def num_units(self) -> int:
        return len(self.blocks)

    def unit_of_cell(self) -> np.ndarray:
        out = np.empty(self.num_cells, dtype=int)
        for i, blk in enumerate(self.blocks):
            out[blk.cells(self.N)] = i
        return out

    def unit_matrix(self) -> np.ndarray:
        """(units, cells) 0/1 membership matrix."""
        M = np.zeros((self.num_units, self.num_cells))
        M[self.unit_of_cell(), np.arange(self.num_cells)] = 1.0
        return M

    def as_dynamic(self) -> "FrameGrid":
        return replace(self, scenario=Scenario.DYNAMIC, tiling=())


def _ratio_to_int(num: float, den: float, what: str) -> int:
    if num <= 0 or den <= 0:
        raise NonIntegerGrid(f"{what}: non-positive dimension")
    r = num / den
    k = int(round(r))
    if k < 1 or abs(r - k) > _GRID_RTOL * max(1.0, abs(r)):
        raise NonIntegerGrid(f"{what} = {r!r} is not a positive integer")
    return k


def unit_tiling(F: int, N: int) -> tuple[StaticBlock, ...]:
    return tuple(StaticBlock(f, 1, n, 1) for f in range(F) for n in range(N))


def check_tiling(F: int, N: int, tiling: Sequence[StaticBlock]) -> None:
    cover = np.zeros((F, N), dtype=int)
    for blk in tiling:
        if blk.nf < 1 or blk.nn < 1 or blk.f0 < 0 or blk.n0 < 0 \
                or blk.f0 + blk.nf > F or blk.n0 + blk.nn > N:
            raise BadTiling(f"block {blk} leaves the {F}x{N} lattice")
        cover[blk.f0:blk.f0 + blk.nf, blk.n0:blk.n0 + blk.nn] += 1
    if (cover > 1).any():
        f, n = np.argwhere(cover > 1)[0]
        raise BadTiling(f"blocks overlap at cell (f={f}, n={n})")
    if (cover == 0).any():
        f, n = np.argwhere(cover == 0)[0]
        raise BadTiling(f"cell (f={f}, n={n}) is not covered")


def build_drbs_grid(T: float, W: float, chi: float, vartheta: float) -> FrameGrid:
    N = _ratio_to_int(T, chi, "T/chi")
    F = _ratio_to_int(W, vartheta, "W/vartheta")
    return FrameGrid(T, W, chi, vartheta, N, F, Scenario.DYNAMIC, ())


def build_srbs_grid(T: float, W: float, chi: float, vartheta: float,
                    tiling: Sequence[StaticBlock]) -> FrameGrid:
    N = _ratio_to_int(T, chi, "T/chi")
    F = _ratio_to_int(W, vartheta, "W/vartheta")
    tiling = tuple(tiling)
    check_tiling(F, N, tiling)
    return FrameGrid(T, W, chi, vartheta, N, F, Scenario.STATIC, tiling)


def mixed_numerology_tiling(F: int, N: int) -> tuple[StaticBlock, ...]:
    """Three-numerology static tiling.

    The first quarter of the subbands carries full-frame blocks (1 subband x N
    slots), the second quarter carries 2-subband x N/2-slot blocks and the
    upper half carries 4-subband x N/4-slot blocks.  On a 16x4 lattice this is
    4 + 4 + 8 = 16 composite blocks.  Smaller lattices clip the block shapes
    to what fits.
    """
    q = max(F // 4, 1)
    bands = [(0, q), (q, min(2 * q, F)), (min(2 * q, F), F)]
    shapes = [(1, N), (2, max(N // 2, 1)), (4, max(N // 4, 1))]
    blocks: list[StaticBlock] = []
    for (lo, hi), (wf, wn) in zip(bands, shapes):
        f = lo
        while f < hi:
            nf = min(wf, hi - f)
            n = 0
            while n < N:
                nn = min(wn, N - n)
                blocks.append(StaticBlock(f, nf, n, nn))
                n += nn
            f += nf
    tiling = tuple(blocks)
    check_tiling(F, N, tiling)
    return tiling


@dataclass(frozen=True)
class User:
    id: int
    cell: int                      # serving base station index b
    service: ServiceClass
    position: Optional[tuple[float, float]] = None
    rate_floor: float = 0.0        # bits per frame (eMBB / mMTC)
    eps_max: float = 0.0           # decoding error ceiling (URLLC / mMTC)
    payload_bits: float = 0.0      # kappa (URLLC / mMTC)


@dataclass(frozen=True)
class Cell:
    index: int
    bs_position: tuple[float, float]
    p_max: float                   # linear, relative to the noise reference


@dataclass(frozen=True)
class NetworkInstance:
    cells: tuple[Cell, ...]
    users: tuple[User, ...]
    noise_psd: float               # N0; the per-subband noise is vartheta * N0
    path_loss_exponent: float
    frame: FrameGrid
    area_side: float = 500.0       # side of the square each cell's users live in
    ref_distance: float = 1.0      # distance normalization for path loss
    dispersion: str = "bandwidth"  # FBL dispersion divisor: "bandwidth" or "blocklength"

    @property
    def B(self) -> int:
        return len(self.cells)

    @property
    def U(self) -> int:
        return len(self.users)

    @property
    def noise(self) -> float:
        """Noise power per small RB, vartheta * N0."""
        return self.frame.vartheta * self.noise_psd

    @property
    def user_bs(self) -> np.ndarray:
        return np.array([u.cell for u in self.users], dtype=int)

    @property
    def p_max(self) -> np.ndarray:
        return np.array([c.p_max for c in self.cells], dtype=float)

    def service_mask(self, service: ServiceClass) -> np.ndarray:
        return np.array([u.service == service for u in self.users], dtype=bool)

    @property
    def rate_floors(self) -> np.ndarray:
        return np.array([u.rate_floor if u.service != ServiceClass.URLLC else 0.0
                         for u in self.users])

    @property
    def error_ceilings(self) -> np.ndarray:
        """eps_max for error-constrained users, nan for the others."""
        return np.array([u.eps_max if u.service != ServiceClass.EMBB else np.nan
                         for u in self.users])

    def with_frame(self, frame: FrameGrid) -> "NetworkInstance":
        return replace(self, frame=frame)

    def with_users(self, users: Sequence[User]) -> "NetworkInstance":
        return replace(self, users=tuple(users))


@dataclass(frozen=True)
class Violation:
    rule: str
    field: str
    detail: str = ""


def validate_instance(inst: NetworkInstance) -> list[Violation]:
    out: list[Violation] = []
    fr = inst.frame
    if fr.N < 1 or fr.F < 1:
        out.append(Violation("NonIntegerGrid", "frame", "empty lattice"))
    else:
        for what, num, den, k in (("N", fr.T, fr.chi, fr.N), ("F", fr.W, fr.vartheta, fr.F)):
            if abs(num / den - k) > _GRID_RTOL * max(1.0, k):
                out.append(Violation("NonIntegerGrid", f"frame.{what}", f"{num}/{den} != {k}"))
        if fr.scenario == Scenario.STATIC:
            try:
                check_tiling(fr.F, fr.N, fr.tiling)
            except BadTiling as e:
                out.append(Violation("BadTiling", "frame.tiling", str(e)))
    if not inst.cells:
        out.append(Violation("NoCells", "cells"))
    for c in inst.cells:
        if not c.p_max > 0:
            out.append(Violation("PowerBudgetNonPositive", f"cells[{c.index}].p_max", repr(c.p_max)))
    if not inst.noise_psd > 0:
        out.append(Violation("NoisePsdNonPositive", "noise_psd", repr(inst.noise_psd)))
    if inst.path_loss_exponent < 0:
        out.append(Violation("PathLossExponentNegative", "path_loss_exponent"))
    if not inst.ref_distance > 0:
        out.append(Violation("RefDistanceNonPositive", "ref_distance"))
    if inst.dispersion not in ("bandwidth", "blocklength"):
        out.append(Violation("UnknownDispersion", "dispersion", inst.dispersion))
    seen: set[tuple[int, int]] = set()
    for i, u in enumerate(inst.users):
        where = f"users[{i}]"
        if not 0 <= u.cell < len(inst.cells):
            out.append(Violation("UnknownCell", f"{where}.cell", repr(u.cell)))
        key = (u.cell, u.id)
        if key in seen:
            out.append(Violation("DuplicateUserId", f"{where}.id", f"id {u.id} repeated in cell {u.cell}"))
        seen.add(key)
        if u.service in (ServiceClass.EMBB, ServiceClass.MMTC) and not u.rate_floor > 0:
            out.append(Violation("RateFloorNonPositive", f"{where}.rate_floor", repr(u.rate_floor)))
        if u.service in (ServiceClass.URLLC, ServiceClass.MMTC):
            if not 0 < u.eps_max < 1:
                out.append(Violation("ErrorCeilingOutOfRange", f"{where}.eps_max", repr(u.eps_max)))
            if not u.payload_bits >= 1:
                out.append(Violation("PayloadTooSmall", f"{where}.payload_bits", repr(u.payload_bits)))
    return out


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def grid_bs_positions(B: int, side: float) -> list[tuple[float, float]]:
    """Base stations on a square grid with spacing ``side`` (cells tile the plane)."""
    cols = int(np.ceil(np.sqrt(B)))
    return [((i % cols) * side, (i // cols) * side) for i in range(B)]


def make_instance(frame: FrameGrid, B: int = 4, per_class: dict | None = None,
                  p_max_db: float = 40.0, noise_db: float = 0.0,
                  path_loss_exponent: float = 3.0, area_side: float = 500.0,
                  ref_distance: float = 1.0, rate_floor_embb: float = 10.0,
                  rate_floor_mmtc: float = 5.0, eps_urllc: float = 1e-5,
                  eps_mmtc: float = 1e-3, payload_bits: float = 4.0,
                  dispersion: str = "bandwidth") -> NetworkInstance:
    """Symmetric instance: the same user mix and QoS targets in every cell."""
    per_class = per_class or {ServiceClass.EMBB: 2, ServiceClass.MMTC: 2, ServiceClass.URLLC: 2}
    per_class = {ServiceClass(k): int(v) for k, v in per_class.items()}
    pmax = db_to_linear(p_max_db)
    cells = tuple(Cell(b, pos, pmax) for b, pos in enumerate(grid_bs_positions(B, area_side)))
    users: list[User] = []
    for b in range(B):
        uid = 0
        for svc in (ServiceClass.EMBB, ServiceClass.MMTC, ServiceClass.URLLC):
            for _ in range(per_class.get(svc, 0)):
                if svc == ServiceClass.EMBB:
                    u = User(uid, b, svc, rate_floor=rate_floor_embb)
                elif svc == ServiceClass.MMTC:
                    u = User(uid, b, svc, rate_floor=rate_floor_mmtc, eps_max=eps_mmtc,
                             payload_bits=payload_bits)
                else:
                    u = User(uid, b, svc, eps_max=eps_urllc, payload_bits=payload_bits)
                users.append(u)
                uid += 1
    noise_psd = db_to_linear(noise_db) / frame.vartheta
    return NetworkInstance(cells, tuple(users), noise_psd, path_loss_exponent, frame,
                           area_side=area_side, ref_distance=ref_distance, dispersion=dispersion)


def set_rate_floor(inst: NetworkInstance, service: ServiceClass, value: float) -> NetworkInstance:
    users = [replace(u, rate_floor=value) if u.service == service else u for u in inst.users]
    return inst.with_users(users)

