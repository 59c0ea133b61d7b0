import numpy as np
import pytest
from hypothesis import given, strategies as st

from rbsched import convexcore as cc
from rbsched.errors import DegeneratePoint

VARS = ["x", "y", "z"]


@st.composite
def posy_and_point(draw):
    nterms = draw(st.integers(1, 6))
    terms = []
    for _ in range(nterms):
        coef = draw(st.floats(1e-3, 1e3))
        exps = {v: draw(st.floats(-3, 3)) for v in VARS if draw(st.booleans())}
        terms.append(cc.Monomial(coef, exps))
    x0 = {v: draw(st.floats(1e-2, 1e2)) for v in VARS}
    x1 = {v: draw(st.floats(1e-2, 1e2)) for v in VARS}
    return cc.Posynomial(tuple(terms)), x0, x1


@given(posy_and_point())
def test_condense_lower_bound_and_tight(data):
    pos, x0, x1 = data
    mono = cc.condense(pos, cc.agma_weights(pos, x0))
    assert mono(x0) == pytest.approx(pos(x0), rel=1e-10)
    assert mono(x1) <= pos(x1) * (1 + 1e-10)


def test_condense_arrays_matches_dict_form():
    pos = cc.Posynomial.of(cc.Monomial(2.0, {"x": 1.0}), cc.Monomial(3.0, {"x": -1.0, "y": 2.0}))
    x0 = {"x": 1.5, "y": 0.7}
    w = cc.agma_weights(pos, x0)
    mono = cc.condense(pos, w)
    logc, e = cc.condense_arrays(np.log([2.0, 3.0]), np.array([[1.0, 0.0], [-1.0, 2.0]]), w)
    assert np.exp(logc) == pytest.approx(mono.coef, rel=1e-12)
    np.testing.assert_allclose(e, [mono.exps["x"], mono.exps["y"]], rtol=1e-12)


def test_degenerate_weights():
    pos = cc.Posynomial.of(cc.Monomial(1.0, {"x": 1.0}))
    with pytest.raises(DegeneratePoint):
        cc.condense(pos, [0.0])
    with pytest.raises(DegeneratePoint):
        cc.agma_weights(pos, {"x": 0.0})
    with pytest.raises(ValueError):
        cc.Monomial(0.0)


def _gp_xy():
    # minimize 1/(x y) s.t. x + y <= 1: optimum x = y = 1/2, value 4
    gp = cc.GpProgram()
    gp.add_variable("x", 1e-6, 10.0)
    gp.add_variable("y", 1e-6, 10.0)
    gp.set_objective_monomial(cc.Monomial(1.0, {"x": -1.0, "y": -1.0}))
    gp.add_posynomial(cc.Posynomial.of(cc.Monomial(1.0, {"x": 1.0}), cc.Monomial(1.0, {"y": 1.0})))
    return gp


def test_gp_closed_form():
    gp = _gp_xy()
    sol = cc.solve_convex(cc.gp_to_convex(gp))
    assert sol.status == "Optimal"
    np.testing.assert_allclose(sol.x, [0.5, 0.5], rtol=1e-6)
    assert np.exp(sol.value) == pytest.approx(4.0, rel=1e-6)
    assert sol.iterations > 0


def test_gp_equality_constraint():
    gp = _gp_xy()
    gp.add_monomial_eq_obj(cc.Monomial(4.0, {"x": 1.0}))       # x = 1/4
    sol = cc.solve_convex(cc.gp_to_convex(gp))
    np.testing.assert_allclose(sol.x, [0.25, 0.75], rtol=1e-6)


def test_gp_infeasible():
    gp = cc.GpProgram()
    gp.add_variable("x", 1e-3, 1e3)
    gp.set_objective_monomial(cc.Monomial(1.0, {"x": 1.0}))
    gp.add_posynomial(cc.Posynomial.of(cc.Monomial(2.0, {"x": -1.0})))   # x >= 2
    gp.add_posynomial(cc.Posynomial.of(cc.Monomial(1.0, {"x": 1.0})))    # x <= 1
    assert cc.solve_convex(cc.gp_to_convex(gp)).status == "Infeasible"


def test_constraint_values_and_dump():
    gp = _gp_xy()
    cp = cc.gp_to_convex(gp)
    u = np.log([0.25, 0.25])
    assert cp.constraint_values(u)[0] == pytest.approx(np.log(0.5))
    ev = gp.evaluate(np.array([0.25, 0.25]))
    assert ev["objective"] == pytest.approx(16.0)
    assert ev["posynomials"][0] == pytest.approx(0.5)
    assert gp.dump() == _gp_xy().dump()
    assert "posynomial" in gp.dump()


def _random_gp(rng, n=4, m=5):
    gp = cc.GpProgram()
    for i in range(n):
        gp.add_variable(f"x{i}", 1e-3, 1e3)
    gp.set_objective(0.0, np.arange(n), -rng.uniform(0.2, 1.0, n))
    for _ in range(m):
        k = rng.integers(1, 4)
        terms = []
        for _ in range(k):
            vs = rng.choice(n, size=2, replace=False)
            terms.append(cc.Monomial(float(rng.uniform(0.1, 2.0)),
                                     {f"x{v}": float(rng.uniform(-1, 2)) for v in vs}))
        gp.add_posynomial(cc.Posynomial(tuple(terms)))
    return gp


@pytest.mark.parametrize("seed", range(8))
def test_gp_agrees_with_cvxpy(seed):
    cp_ = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(seed)
    gp = _random_gp(rng)
    sol = cc.solve_convex(cc.gp_to_convex(gp))
    # second route: the same GP through cvxpy's log-log conic path
    x = cp_.Variable(gp.n, pos=True)
    obj = cp_.prod(cp_.hstack([x[int(v)] ** float(a) for v, a in zip(gp.obj_vars, gp.obj_exps)]))
    cons = [x >= 1e-3, x <= 1e3]
    logc, A, grp = gp.term_table()
    A = A.tocsr()
    for g in range(gp.num_constraints):
        terms = []
        for t in np.nonzero(grp == g)[0]:
            row = A.getrow(t)
            mono = float(np.exp(logc[t]))
            for j, a in zip(row.indices, row.data):
                mono = mono * x[int(j)] ** float(a)
            terms.append(mono)
        cons.append(cp_.sum(cp_.hstack(terms)) <= 1)
    prob = cp_.Problem(cp_.Minimize(obj), cons)
    prob.solve(gp=True)
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        assert sol.status == "Infeasible"
        return
    assert sol.status == "Optimal"
    assert np.exp(sol.value) == pytest.approx(prob.value, rel=1e-4)
