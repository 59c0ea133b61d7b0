import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rbsched.asm import (AsmConfig, AsmTrace, build_power_gp, initial_state, linearize_sinr,
                         round_assignment, run_asm, run_asm_detailed, solve_power_subproblem)
from rbsched.errors import Infeasible
from rbsched.model import ServiceClass, set_rate_floor
from rbsched.rate import AllocationState, column_residual, qos_report, sinr, sum_rate

from conftest import desk_instance, tiny_instance

FAST = AsmConfig(max_outer=3, max_inner=2)


def test_config_validation():
    with pytest.raises(ValueError):
        AsmConfig(eps1=0.0)
    with pytest.raises(ValueError):
        AsmConfig(rounding="nearest")
    with pytest.raises(ValueError):
        AsmConfig(zeta2=0.5)


def test_initial_state_structure():
    inst, real = desk_instance(0)
    st0 = initial_state(inst, real)
    assert st0.relaxed
    assert (st0.s >= 1e-6 - 1e-15).all() and (st0.s <= 1.0).all()
    np.testing.assert_allclose(st0.p, 1e4 / 32)
    # each URLLC user's weight is concentrated on a single slot column
    for u in np.nonzero(inst.service_mask(ServiceClass.URLLC))[0]:
        cols = (st0.s[u] > 1e-3).any(axis=0)
        assert cols.sum() == 1


@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_linearization_exact_at_expansion_point(seed, scale):
    inst, real = desk_instance(seed % 7)
    rng = np.random.default_rng(seed)
    shp = (inst.U, inst.frame.F, inst.frame.N)
    state = AllocationState(rng.uniform(0.1, 100, shp) * scale, rng.uniform(0.01, 1, shp), True)
    lin = linearize_sinr(state, real, inst)
    gam = sinr(state, real, inst).reshape(inst.U, -1)
    np.testing.assert_allclose(lin.gamma0, gam, rtol=1e-12)
    np.testing.assert_allclose(lin.value(lin.p0, lin.s0), gam, rtol=1e-12)


def test_literal_gradient_scales_own_term():
    inst, real = desk_instance(3)
    state = initial_state(inst, real)
    a = linearize_sinr(state, real, inst)
    b = linearize_sinr(state, real, inst, literal_gradient=True)
    np.testing.assert_allclose(b.d_own, a.d_own / np.log(2.0))


def test_rounding_is_binary_exclusive_and_single_column():
    inst, real = desk_instance(4)
    st0 = initial_state(inst, real)
    sb = round_assignment(st0.s, st0.p, real, inst)
    assert set(np.unique(sb)) <= {0.0, 1.0}
    for b in range(inst.B):
        assert sb[inst.user_bs == b].sum(axis=0).max() <= 1.0
    for u in np.nonzero(inst.service_mask(ServiceClass.URLLC))[0]:
        assert column_residual(sb[u]) == 0.0


def test_power_subproblem_does_not_lower_relaxed_objective():
    inst, real = desk_instance(5)
    st0 = initial_state(inst, real)
    res = run_asm_detailed(inst, real, AsmConfig(max_outer=1, max_inner=2, precheck=False))
    obj = res.trace.objectives
    assert np.all(np.diff(obj) >= -1e-6 * np.maximum(1.0, np.abs(obj[:-1])))


def test_power_gp_has_one_budget_row_per_bs():
    inst, real = desk_instance(6)
    st0 = initial_state(inst, real)
    U = inst.U
    pg = build_power_gp(st0.s.reshape(U, -1), st0.p.reshape(U, -1), real, inst, FAST)
    labels = [l for l in pg.gp.labels if "budget" in l]
    assert len(labels) == inst.B


@pytest.mark.parametrize("seed", [0, 1])
def test_run_asm_tiny_returns_feasible_binary_state(seed):
    inst, real = tiny_instance(seed)
    state, trace = run_asm(inst, real, AsmConfig(precheck=False))
    rep = qos_report(state, real, inst)
    assert rep.feasible, rep.violations
    assert not state.relaxed and set(np.unique(state.s)) <= {0.0, 1.0}
    assert trace.outer_iterations >= 1 and trace.termination in ("converged", "max_outer")
    assert trace.power_ipm_iterations >= trace.power_iterations > 0
    assert rep.sum_rate == pytest.approx(sum_rate(state, real, inst))


def test_run_asm_desk_and_trace_csv(tmp_path):
    inst, real = desk_instance(2)
    state, trace = run_asm(inst, real, AsmConfig(max_outer=3, max_inner=2, precheck=False))
    assert qos_report(state, real, inst).feasible
    trace.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iteration", "stage", "inner", "objective", "max_residual"]
    assert rows[-1][1] == "rounded"
    assert trace.total_iterations == trace.power_iterations + trace.assignment_iterations


def test_impossible_floor_raises_infeasible():
    inst, real = tiny_instance(0)
    inst = set_rate_floor(inst, ServiceClass.EMBB, 1e4)
    with pytest.raises(Infeasible):
        run_asm(inst, real, AsmConfig())                  # precheck catches it
    with pytest.raises(Infeasible):
        run_asm(inst, real, AsmConfig(precheck=False, max_outer=2, max_inner=2))
