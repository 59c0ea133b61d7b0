import dataclasses
from pathlib import Path

import pytest
from hypothesis import settings

from rbsched.channel import sample_channel, sample_placement
from rbsched.config import load_instance_config
from rbsched.model import build_drbs_grid, build_srbs_grid, make_instance, mixed_numerology_tiling

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def tiny_instance(seed: int, K: int | None = None):
    """Single BS on a 2x2 lattice; K alternates 1/2 per class with the seed."""
    fr = build_drbs_grid(0.5e-3, 30e3, 0.25e-3, 15e3)
    K = 1 + seed % 2 if K is None else K
    inst = make_instance(fr, B=1, ref_distance=100.0, per_class={"embb": K, "mmtc": K, "urllc": K})
    inst = sample_placement(inst, seed)
    return inst, sample_channel(inst, seed)


def desk_instance(seed: int, scenario: str = "drbs", B: int = 2):
    fr = build_drbs_grid(1e-3, 120e3, 0.25e-3, 15e3)
    if scenario == "srbs":
        fr = build_srbs_grid(1e-3, 120e3, 0.25e-3, 15e3, mixed_numerology_tiling(8, 4))
    inst = make_instance(fr, B=B, ref_distance=100.0, per_class={"embb": 1, "mmtc": 1, "urllc": 1},
                         rate_floor_embb=100.0, rate_floor_mmtc=20.0)
    inst = sample_placement(inst, seed)
    return inst, sample_channel(inst, seed)


@pytest.fixture(scope="session")
def desk_config():
    return load_instance_config(CONFIGS / "desk.yaml")


# acceptance verdict lines, repeated in the terminal summary so they survive output capture
VERDICTS: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
