import math

import numpy as np
import pytest

from conftest import ladder12, setup_map
from subreglab.geometry import NormContext, ScaleLadder
from subreglab.mappings import GraphPoint, make_function_graph
from subreglab.variational import (
    CoderivElement,
    calm_shift_bound,
    coderivative_shift,
    element_quotient,
    elements_at_point,
    eps_normal_quotient,
    positive_homogeneity_test,
    semismooth_star_test,
)

CTX1 = NormContext(kind="l1", dim_x=1, dim_y=1)


def _elem(x, y, y_star, x_star, **kw):
    return CoderivElement(np.atleast_1d(np.asarray(x, float)),
                          np.atleast_1d(np.asarray(y, float)),
                          np.atleast_1d(np.asarray(y_star, float)),
                          np.atleast_1d(np.asarray(x_star, float)), **kw)


def test_element_quotient_closed_form():
    base = GraphPoint(np.zeros(1), np.zeros(1))
    # x = 0.5, y = 0.25, x* = 1, y* = 1 in l1/linf pairing:
    # numerator |0.5 - 0.25| = 0.25, product norm 0.75, dual norm 1
    e = _elem([0.5], [0.25], [1.0], [1.0])
    assert element_quotient(e, base, CTX1) == pytest.approx(0.25 / 0.75, rel=1e-14)


def test_element_quotient_edge_cases():
    base = GraphPoint(np.zeros(1), np.zeros(1))
    at_base = _elem([0.0], [0.0], [1.0], [1.0])
    assert element_quotient(at_base, base, CTX1) == 0.0
    zero_dual = _elem([0.5], [0.5], [0.0], [0.0])
    assert math.isinf(element_quotient(zero_dual, base, CTX1))


def test_elements_at_point_use_the_analytic_oracle():
    F, base, ctx = setup_map("square")
    gp = GraphPoint(np.array([0.5]), np.array([0.25]))
    elems = elements_at_point(F, gp, ctx)
    assert elems
    for e in elems:
        # the graph of x^2 is smooth: x* = f'(x) y* = 2 * 0.5 * y*
        assert e.x_star[0] == pytest.approx(1.0 * e.y_star[0], rel=1e-12)
        assert e.eps == 0.0


def test_eps_normal_quotient_certifies_a_true_normal():
    F, base, ctx = setup_map("square")
    gp = GraphPoint(np.array([0.5]), np.array([0.25]))
    # (x*, -y*) = (1, -1) is normal to the smooth graph at (0.5, 0.25)
    q, count = eps_normal_quotient(F, gp, [1.0], [1.0], 0.05, ctx, n=512, seed=3)
    assert count > 0
    assert q <= 5e-3  # curvature contributes at most O(radius)
    # a clearly wrong candidate has order-one defect
    q_bad, _ = eps_normal_quotient(F, gp, [-1.0], [1.0], 0.05, ctx, n=512, seed=3)
    assert q_bad > 0.3


def test_eps_normal_quotient_rejects_zero_dual():
    F, base, ctx = setup_map("square")
    with pytest.raises(ValueError):
        eps_normal_quotient(F, base, [0.0], [0.0], 0.1, ctx)


def test_coderivative_shift_transports_the_dual_pair():
    e = _elem([0.5], [0.25], [2.0], [1.0], eps=0.01)
    shifted = coderivative_shift(e, grad=[[3.0]], f_x=[0.1], ctx=CTX1)
    assert shifted.x_star[0] == pytest.approx(1.0 + 3.0 * 2.0, rel=1e-14)
    assert shifted.y[0] == pytest.approx(0.35, rel=1e-14)
    assert shifted.eps == pytest.approx((3.0 + 1.0) * 0.01, rel=1e-14)
    back = coderivative_shift(shifted, grad=[[3.0]], f_x=[0.1], ctx=CTX1, sign=-1.0)
    assert back.x_star[0] == pytest.approx(1.0, rel=1e-14)
    assert back.y[0] == pytest.approx(0.25, rel=1e-14)


def test_calm_shift_bound_formula_and_guards():
    assert calm_shift_bound(0.1, 0.5, 2.0) == pytest.approx((0.1 + 1.0) / 0.5, rel=1e-14)
    assert calm_shift_bound(0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        calm_shift_bound(0.1, 1.0)
    with pytest.raises(ValueError):
        calm_shift_bound(-0.1, 0.5)


@pytest.mark.parametrize("mid", ["abs", "square", "compl_angle"])
def test_semismooth_star_passes_on_benign_maps(mid):
    F, base, ctx = setup_map(mid)
    rep = semismooth_star_test(F, base, ladder12(), ctx)
    assert rep.verdict == "pass"
    for delta, worst, n in rep.scales:
        assert delta > 0.0
        assert n >= 0


def test_semismooth_star_fails_on_the_oscillating_map():
    F, base, ctx = setup_map("oscillating")
    rep = semismooth_star_test(F, base, ladder12(), ctx)
    assert rep.verdict == "fail"
    finite = [w for _, w, n in rep.scales if n > 0 and not math.isnan(w)]
    assert finite[-1] > 0.05  # the defect does not decay toward the base
    assert rep.worst_witness is not None


def test_semismooth_star_report_rows_are_triples():
    F, base, ctx = setup_map("abs")
    rep = semismooth_star_test(F, base, ScaleLadder(depth=4, samples_per_scale=64, seed=5), ctx)
    deltas = [row[0] for row in rep.scales]
    assert deltas == sorted(deltas, reverse=True)
    assert all(len(row) == 3 for row in rep.scales)


def test_positive_homogeneity_detects_cones_and_rejects_parabolas():
    cone = lambda x: np.array([abs(x[0]) + 0.5 * x[0]])
    ok, err = positive_homogeneity_test(cone, np.zeros(1), radius=1.0,
                                        n_probes=400, seed=2)
    assert ok and err <= 1e-12
    bent = lambda x: np.array([x[0] ** 2])
    ok, err = positive_homogeneity_test(bent, np.zeros(1), radius=1.0,
                                        n_probes=400, seed=2)
    assert not ok
    assert err > 1e-3


def test_semismooth_star_on_a_smooth_graph_sees_curvature_decay():
    F = make_function_graph(lambda x: np.array([math.sin(x[0])]),
                            grad=lambda x: np.array([[math.cos(x[0])]]),
                            dim_x=1, dim_y=1, kind="l1", name="sin")
    base = GraphPoint(np.zeros(1), np.zeros(1))
    ctx = NormContext(kind="l1", dim_x=1, dim_y=1)
    rep = semismooth_star_test(F, base, ladder12(), ctx)
    assert rep.verdict == "pass"
