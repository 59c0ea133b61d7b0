import numpy as np
import pytest
from hypothesis import given, strategies as st

from rbsched.errors import BadTiling, NonIntegerGrid
from rbsched.model import (Scenario, ServiceClass, StaticBlock, build_drbs_grid, build_srbs_grid,
                           check_tiling, make_instance, mixed_numerology_tiling, set_rate_floor,
                           unit_tiling, validate_instance)


def test_drbs_grid_dimensions():
    fr = build_drbs_grid(1e-3, 240e3, 0.25e-3, 15e3)
    assert (fr.F, fr.N, fr.num_cells) == (16, 4, 64)
    assert fr.scenario == Scenario.DYNAMIC
    assert fr.psi == pytest.approx(3.75)
    assert fr.num_units == 64


@pytest.mark.parametrize("T,W", [(1e-3, 100e3), (0.9e-3, 120e3), (0.0, 120e3)])
def test_non_integer_grid_rejected(T, W):
    with pytest.raises(NonIntegerGrid):
        build_drbs_grid(T, W, 0.25e-3, 15e3)


def test_mixed_tiling_16x4_has_16_blocks():
    tiles = mixed_numerology_tiling(16, 4)
    assert len(tiles) == 16
    sizes = sorted(b.size for b in tiles)
    assert sizes == [4] * 16
    shapes = {(b.nf, b.nn) for b in tiles}
    assert shapes == {(1, 4), (2, 2), (4, 1)}


@given(st.sampled_from([1, 2, 4, 8, 16]), st.sampled_from([1, 2, 4]))
def test_mixed_tiling_covers_lattice(F, N):
    tiles = mixed_numerology_tiling(F, N)
    check_tiling(F, N, tiles)
    fr = build_srbs_grid(N * 0.25e-3, F * 15e3, 0.25e-3, 15e3, tiles)
    M = fr.unit_matrix()
    np.testing.assert_array_equal(M.sum(axis=0), 1.0)


def test_bad_tilings():
    with pytest.raises(BadTiling, match="overlap"):
        check_tiling(2, 2, [StaticBlock(0, 2, 0, 2), StaticBlock(0, 1, 0, 1)])
    with pytest.raises(BadTiling, match="not covered"):
        check_tiling(2, 2, [StaticBlock(0, 1, 0, 2)])
    with pytest.raises(BadTiling, match="leaves"):
        check_tiling(2, 2, [StaticBlock(1, 2, 0, 2)])


def test_unit_tiling_matches_dynamic_units():
    fr = build_srbs_grid(1e-3, 60e3, 0.25e-3, 15e3, unit_tiling(4, 4))
    np.testing.assert_array_equal(fr.unit_of_cell(), fr.as_dynamic().unit_of_cell())


def test_make_instance_counts_and_validation():
    fr = build_drbs_grid(1e-3, 120e3, 0.25e-3, 15e3)
    inst = make_instance(fr, B=3, per_class={"embb": 2, "mmtc": 1, "urllc": 1})
    assert inst.U == 12 and inst.B == 3
    assert inst.service_mask(ServiceClass.EMBB).sum() == 6
    assert validate_instance(inst) == []
    assert inst.noise == pytest.approx(1.0)
    assert inst.p_max[0] == pytest.approx(1e4)
    assert np.isnan(inst.error_ceilings[inst.service_mask(ServiceClass.EMBB)]).all()


def test_validation_reports_bad_fields():
    fr = build_drbs_grid(1e-3, 120e3, 0.25e-3, 15e3)
    inst = make_instance(fr, B=1, per_class={"embb": 1, "mmtc": 1, "urllc": 1})
    inst = set_rate_floor(inst, ServiceClass.EMBB, 0.0)
    rules = {v.rule for v in validate_instance(inst)}
    assert "RateFloorNonPositive" in rules
