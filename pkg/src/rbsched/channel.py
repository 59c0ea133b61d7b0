"""Seeded user placement and Rayleigh-faded path-loss channel gains.

Random streams come from numpy's Philox counter-based bit generator.  A
stream is addressed by (seed, purpose tag); the tag keeps placement and fading
draws independent so that changing one never shifts the other.  Per-trial
seeds are ``base_seed ^ trial``.  Golden values in the tests were produced
with numpy 2.x's Philox-4x64 and ``Generator.random`` / ``Generator.exponential``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .model import NetworkInstance

_TAG_PLACEMENT = 1
_TAG_FADING = 2


def rng_for(seed: int, tag: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**63 - 1), spawn_key=(tag,))
    return np.random.Generator(np.random.Philox(ss))


def trial_seed(base_seed: int, trial: int) -> int:
    return int(base_seed) ^ int(trial)


@dataclass(frozen=True)
class ChannelRealization:
    """Power gains g[b, u, f, n] from base station b to user u on small cell (f, n)."""
    g: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.g.shape

    def flat(self) -> np.ndarray:
        """(B, U, F*N) view with cells flattened as f*N + n."""
        B, U, F, N = self.g.shape
        return self.g.reshape(B, U, F * N)


def sample_placement(inst: NetworkInstance, seed: int) -> NetworkInstance:
    """Drop every user uniformly in the square of side ``area_side`` centred on its BS."""
    rng = rng_for(seed, _TAG_PLACEMENT)
    side = inst.area_side
    offs = (rng.random((inst.U, 2)) - 0.5) * side
    users = []
    for u, d in zip(inst.users, offs):
        bx, by = inst.cells[u.cell].bs_position
        users.append(replace(u, position=(float(bx + d[0]), float(by + d[1]))))
    return inst.with_users(users)


def distances(inst: NetworkInstance) -> np.ndarray:
    """(B, U) BS-to-user distances in metres."""
    bs = np.array([c.bs_position for c in inst.cells], dtype=float)
    if any(u.position is None for u in inst.users):
        raise ValueError("user positions are not set; call sample_placement first")
    ue = np.array([u.position for u in inst.users], dtype=float)
    return np.linalg.norm(bs[:, None, :] - ue[None, :, :], axis=-1)


def path_loss(inst: NetworkInstance) -> np.ndarray:
    """(B, U) large-scale gain L^-c with L = max(distance / ref_distance, 1)."""
    L = np.maximum(distances(inst) / inst.ref_distance, 1.0)
    return L ** (-inst.path_loss_exponent)


def sample_channel(inst: NetworkInstance, seed: int) -> ChannelRealization:
    rng = rng_for(seed, _TAG_FADING)
    F, N = inst.frame.F, inst.frame.N
    kappa = rng.exponential(1.0, size=(inst.B, inst.U, F, N))
    g = kappa * path_loss(inst)[:, :, None, None]
    return ChannelRealization(g)


def dump_channel_csv(real: ChannelRealization, path: str | Path) -> None:
    B, U, F, N = real.g.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["b", "k", "f", "n", "g"])
        for idx in np.ndindex(B, U, F, N):
            w.writerow([*idx, repr(float(real.g[idx]))])


def load_channel_csv(path: str | Path) -> ChannelRealization:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    idx = np.array([[int(r["b"]), int(r["k"]), int(r["f"]), int(r["n"])] for r in rows])
    shape = tuple(idx.max(axis=0) + 1)
    g = np.zeros(shape)
    g[tuple(idx.T)] = [float(r["g"]) for r in rows]
    return ChannelRealization(g)
