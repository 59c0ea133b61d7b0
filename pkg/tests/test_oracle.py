import numpy as np
import pytest

from rbsched.oracle import _assignments, _maxplus, brute_force, grid_feasible
from rbsched.rate import qos_report, sum_rate

from conftest import desk_instance, tiny_instance


def test_maxplus_small():
    a = np.array([0.0, 1.0, 5.0])
    b = np.array([0.0, 3.0, 4.0])
    c, i = _maxplus(a, b)
    np.testing.assert_allclose(c, [0.0, 3.0, 5.0])
    assert i[2] == 2                      # both units to a


def test_assignment_count_single_column_rule():
    inst, _ = tiny_instance(0, K=1)       # 3 users, 4 cells in a 2x2 grid
    n = sum(1 for _ in _assignments(inst))
    # 4^4 = 256 owner vectors; URLLC user 2 may not span both columns
    bad = 0
    import itertools
    for own in itertools.product(range(-1, 3), repeat=4):
        cols = {c % 2 for c, o in enumerate(own) if o == 2}
        bad += len(cols) > 1
    assert n == 256 - bad


def test_brute_force_state_is_consistent():
    inst, real = tiny_instance(5)
    res = brute_force(inst, real, grid=60)
    assert np.isfinite(res.value)
    rep = qos_report(res.state, real, inst)
    assert rep.feasible, rep.violations
    assert sum_rate(res.state, real, inst) == pytest.approx(res.value, rel=1e-9)


def test_brute_force_needs_single_bs():
    inst, real = desk_instance(0)
    with pytest.raises(ValueError):
        brute_force(inst, real)


def test_grid_feasible_simple():
    gd = np.array([1.0, 1.0])
    cross = np.array([[0.0, 0.1], [0.1, 0.0]])
    assert grid_feasible(gd, cross, np.array([1.0, 1.0]), 1.0, np.array([10.0, 10.0]), step=0.01)
    assert not grid_feasible(gd, cross, np.array([20.0, 1.0]), 1.0, np.array([10.0, 10.0]), step=0.01)
