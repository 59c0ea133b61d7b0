import numpy as np
import pytest
from hypothesis import given, strategies as st

from rbsched.errors import DimensionMismatch
from rbsched.rate import (AllocationState, column_residual, interference, outage_probabilities,
                          q_approx_constants, q_approx_error, qos_report, shannon_rate_from_sinr,
                          sinr, sinr_threshold, sum_rate, urllc_fbl_rate_from_sinr, user_rates)

from conftest import desk_instance

# (kappa, psi) -> (varpi, theta, eta1, eta2), evaluated at 30 digits with mpmath
Q_CONSTANTS = {
    (4, 3.75): (0.086475544604182224911, 1.0945882456412534358, -1.8912141673877109224,
                4.080390658670217794),
    (32, 7.5): (0.0082796574020741701022, 18.248400577313866415, -3.8025342583857340768,
                40.299335413013466907),
    (1, 3.75): (0.23797734616736479978, 0.20302503608211665096, -0.88194752078291751467,
                1.2879975929471508166),
}
THRESHOLDS = {(4, 3.75, 1e-5): 4.0803309426219572147, (4, 3.75, 1e-3): 4.0744190538441598652,
              (32, 7.5, 1e-5): 40.298894394316752915, (1, 3.75, 1e-3): 1.2858276478334207483}


@pytest.mark.parametrize("key", sorted(Q_CONSTANTS))
def test_q_constants_frozen(key):
    np.testing.assert_allclose(q_approx_constants(*key), Q_CONSTANTS[key], rtol=1e-10)


@pytest.mark.parametrize("key", sorted(THRESHOLDS))
def test_sinr_threshold_frozen(key):
    kappa, psi, eps = key
    assert sinr_threshold(eps, kappa, psi) == pytest.approx(THRESHOLDS[key], rel=1e-10)


@given(st.floats(1, 64), st.floats(0.5, 20), st.floats(1e-9, 0.49))
def test_threshold_is_smallest_sinr_meeting_eps(kappa, psi, eps):
    t = sinr_threshold(eps, kappa, psi)
    assert q_approx_error(t, kappa, psi) <= eps + 1e-9
    if t > 1e-9:
        assert q_approx_error(t * (1 - 1e-6) - 1e-9, kappa, psi) > eps - 1e-9


@given(st.floats(1, 64), st.floats(0.5, 20), st.lists(st.floats(-10, 100), min_size=2, max_size=20))
def test_error_model_nonincreasing_and_bounded(kappa, psi, gammas):
    g = np.sort(np.array(gammas))
    e = q_approx_error(g, kappa, psi)
    assert ((e >= 0) & (e <= 1)).all()
    assert (np.diff(e) <= 1e-12).all()


@given(st.floats(1e-3, 1e4), st.floats(1e-9, 0.49))
def test_fbl_below_shannon(gamma, eps):
    r = urllc_fbl_rate_from_sinr(gamma, eps, 0.25e-3, 15e3)
    assert 0.0 <= r <= shannon_rate_from_sinr(gamma, 3.75) + 1e-12


def test_column_residual():
    s = np.zeros((2, 3))
    s[:, 1] = 1.0
    assert column_residual(s) == 0.0
    s[0, 2] = 1.0
    assert column_residual(s) == pytest.approx(4.0)     # a = (0, 2, 1): 2*1 + 1*2


def test_interference_hand_computed():
    inst, real = desk_instance(0)
    st_ = AllocationState.zeros(inst)
    # user 0 (BS 0) and user 3 (BS 1) share cell (0, 0)
    st_.p[0, 0, 0], st_.s[0, 0, 0] = 2.0, 1.0
    st_.p[3, 0, 0], st_.s[3, 0, 0] = 5.0, 1.0
    I = interference(st_, real, inst)
    assert I[0, 0, 0] == pytest.approx(5.0 * real.g[1, 0, 0, 0])
    assert I[3, 0, 0] == pytest.approx(2.0 * real.g[0, 3, 0, 0])
    assert I[1, 0, 0] == pytest.approx(5.0 * real.g[1, 1, 0, 0])   # same-BS user 1 hears BS 1 only
    g = sinr(st_, real, inst)
    assert g[0, 0, 0] == pytest.approx(2.0 * real.g[0, 0, 0, 0] / (I[0, 0, 0] + 1.0))
    assert sum_rate(st_, real, inst) == pytest.approx(user_rates(st_, real, inst).sum())


def test_dimension_mismatch():
    inst, real = desk_instance(0)
    bad = AllocationState(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    with pytest.raises(DimensionMismatch):
        sinr(bad, real, inst)


def test_zero_allocation_outage():
    inst, real = desk_instance(1)
    rep = qos_report(AllocationState.zeros(inst), real, inst)
    assert not rep.feasible
    assert outage_probabilities([rep]) == (1.0, 1.0)
    assert rep.sum_rate == 0.0


def test_qos_report_csv(tmp_path):
    inst, real = desk_instance(2)
    rep = qos_report(AllocationState.zeros(inst), real, inst)
    rep.to_csv(tmp_path / "q.csv")
    lines = (tmp_path / "q.csv").read_text().splitlines()
    assert lines[0] == "constraint,index,residual"
    assert len(lines) == 1 + len(rep.rows())
