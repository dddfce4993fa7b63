import json
import math

import numpy as np
import pytest

from conftest import ladder12, setup_map
from subreglab.geometry import NormContext, ScaleLadder, derive_seed
from subreglab.mappings import GraphPoint, make_function_graph, sum_with_function
from subreglab.moduli import estimate_clm, estimate_ssrg
from subreglab.perturb import (
    WitnessError,
    build_fclm_perturbation,
    build_lip_perturbation,
    build_ss_perturbation,
    build_ssr_destabilizer,
    extract_witness,
    firmly_calm_test,
    load_perturbation,
    random_calm_perturbation,
    validate_witness,
    verify_builder,
)

# the full builder matrix: every entry must extract, build, and verify
BUILD_MATRIX = [
    ("identity", "lip", 2.5),
    ("zero", "lip", 0.01),
    ("square", "lip", 0.5),
    ("xsin", "lip", 1.5),
    ("zero", "fclm", 0.1),
    ("interval", "fclm", 1.2),
    ("xsin", "fclm", 0.1),
    ("square", "ss", 0.5),
    ("compl_angle", "ss", 0.5),
    ("spiral", "ss", 0.5),
    ("abs", "ss", 1.5),
    ("xsin", "ss", 1.05),
    ("identity", "ssr", 1.1),
    ("square", "ssr", 0.6),
]

BUILDERS = {
    "lip": build_lip_perturbation,
    "fclm": build_fclm_perturbation,
    "ss": build_ss_perturbation,
}


def _build(mid, kind, gamma, seed=7):
    F, base, ctx = setup_map(mid)
    lad = ladder12(seed)
    if kind == "ssr":
        p = build_ssr_destabilizer(F, base, gamma, lad, ctx)
    else:
        w = extract_witness(F, base, kind, gamma, lad, ctx)
        p = BUILDERS[kind](w, gamma)
    return F, base, ctx, lad, p


def test_witness_extraction_invariants():
    F, base, ctx = setup_map("identity")
    w = extract_witness(F, base, "lip", 2.5, ladder12(), ctx)
    assert w.kind == "lip"
    assert w.gamma == 2.5
    assert w.gamma_prime < 2.5
    ts = w.scales
    assert all(a > b for a, b in zip(ts, ts[1:]))  # strictly shrinking scales
    for e in w.entries:
        assert e.t > 0.0
        assert ctx.norm(e.x - base.x) == pytest.approx(e.t, rel=1e-12)
    assert validate_witness(w, ctx) == []


def test_validate_witness_flags_tampering():
    F, base, ctx = setup_map("identity")
    w = extract_witness(F, base, "lip", 2.5, ladder12(), ctx)
    w.entries[0], w.entries[1] = w.entries[1], w.entries[0]
    problems = validate_witness(w, ctx)
    assert problems
    assert any("scale" in p or "decreas" in p for p in problems)


def test_extraction_refuses_below_the_modulus():
    # the identity map has lip = 1; no destabilizer exists below that
    F, base, ctx = setup_map("identity")
    with pytest.raises(WitnessError, match="no witness below gamma"):
        extract_witness(F, base, "lip", 0.5, ladder12(), ctx)


def test_fclm_extraction_refuses_on_the_interval_map():
    F, base, ctx = setup_map("interval")
    with pytest.raises(WitnessError, match="no witness below gamma"):
        extract_witness(F, base, "fclm", 0.8, ladder12(), ctx)


@pytest.mark.parametrize("gamma", [0.5, 0.9])
def test_ssr_destabilizer_refuses_below_the_quotient(gamma):
    F, base, ctx = setup_map("identity")
    with pytest.raises(WitnessError, match="no destabilizer below gamma"):
        build_ssr_destabilizer(F, base, gamma, ladder12(), ctx)


@pytest.mark.parametrize("mid,kind,gamma", BUILD_MATRIX)
def test_builder_matrix_verifies(mid, kind, gamma):
    F, base, ctx, lad, p = _build(mid, kind, gamma)
    rep = verify_builder(p, F, base, lad, ctx)
    assert rep.passed, (rep.notes, rep.destabilization[-3:])
    assert rep.interpolation_max_err <= 1e-14
    assert rep.base_value_err == 0.0
    assert rep.gradient_max_relerr <= 1e-5
    assert rep.modulus_ok
    assert rep.gamma_dp < gamma
    finite = [v for _, v in rep.destabilization if not math.isinf(v)]
    assert finite[-1] <= 0.05


def test_interpolation_is_bitwise_exact():
    F, base, ctx, lad, p = _build("square", "ss", 0.5)
    assert np.array_equal(p.eval(base.x), np.zeros(p.dim_y))
    for (xk, yb_anchor), tgt in zip(p.anchors, p.anchor_targets):
        got = p.eval(xk)
        assert np.array_equal(got, tgt), (xk, got, tgt)
        assert np.array_equal(yb_anchor, base.y)
        # F + f passes through (x_k, yb) exactly
        assert np.array_equal(tgt + np.asarray(F.func(xk)), base.y)


def test_supports_are_disjoint():
    for mid, kind, gamma in (("identity", "lip", 2.5), ("xsin", "ss", 1.05)):
        F, base, ctx, lad, p = _build(mid, kind, gamma)
        rng = np.random.default_rng(23)
        for _ in range(400):
            x = rng.uniform(-0.6, 0.6, size=p.dim_x)
            assert p.component_count(x) <= 1
        for xk, _ in p.anchors:
            assert p.component_count(xk) == 1


def test_anchor_eps_vanishes_for_bump_and_case1_builds():
    _, _, _, _, p_lip = _build("identity", "lip", 2.5)
    assert all(e == 0.0 for e in p_lip.anchor_eps)
    _, _, _, _, p_cone = _build("spiral", "ss", 0.5)
    assert p_cone.case == 1
    assert all(e == 0.0 for e in p_cone.anchor_eps)


def test_case2_build_has_a_positive_floor():
    _, _, _, _, p = _build("square", "ss", 0.5)
    assert p.case == 2
    assert p.floor_radius > 0.0
    # below the floor the perturbation vanishes identically
    for frac in (0.5, 0.1, 0.01):
        x = np.array([p.floor_radius * frac])
        assert np.array_equal(p.eval(x), np.zeros(1))


@pytest.mark.parametrize("mid,kind,gamma", [
    ("identity", "lip", 2.5),
    ("xsin", "fclm", 0.1),
    ("square", "ss", 0.5),
    ("identity", "ssr", 1.1),
])
def test_serialization_round_trip_is_bit_identical(mid, kind, gamma):
    F, base, ctx, lad, p = _build(mid, kind, gamma)
    desc = json.loads(json.dumps(p.describe()))
    q = load_perturbation(desc)
    rng = np.random.default_rng(31)
    xs = [rng.uniform(-0.7, 0.7, size=p.dim_x) for _ in range(300)]
    xs += [xk for xk, _ in p.anchors]
    xs += list(p.probes)
    for x in xs:
        assert np.array_equal(p.eval(x), q.eval(x))
        dp, dq = p.derivative(x), q.derivative(x)
        if dp is None or dq is None:
            assert dp is None and dq is None
        else:
            assert np.array_equal(dp, dq)


def test_reloaded_perturbation_verifies():
    F, base, ctx, lad, p = _build("xsin", "fclm", 0.1)
    q = load_perturbation(json.loads(json.dumps(p.describe())))
    rep = verify_builder(q, F, base, lad, ctx)
    assert rep.passed


def test_tampered_description_is_rejected():
    # replaying a witness with a stronger claim than it certifies must fail
    F, base, ctx, lad, p = _build("identity", "lip", 2.5)
    desc = p.describe()
    desc["gamma"] = float(0.9).hex()
    with pytest.raises(WitnessError):
        load_perturbation(desc)


def test_firmly_calm_accepts_a_kinked_but_calm_function():
    f = lambda x: np.array([abs(x[0])])
    out = firmly_calm_test(f, np.zeros(1), ladder12(),
                           NormContext(kind="l1", dim_x=1, dim_y=1))
    assert out["ok"]


def test_firmly_calm_rejects_a_jump():
    c = 0.01

    def f(x):
        return np.array([0.0 if x[0] < c else 1.0])

    out = firmly_calm_test(f, np.zeros(1), ladder12(),
                           NormContext(kind="l1", dim_x=1, dim_y=1),
                           extra_points=[np.array([c])])
    assert not out["ok"]


def test_firmly_calm_rejects_divergent_quotients():
    f = lambda x: np.array([math.sqrt(abs(x[0]))])
    out = firmly_calm_test(f, np.zeros(1), ladder12(),
                           NormContext(kind="l1", dim_x=1, dim_y=1))
    assert not out["ok"]


def test_random_calm_perturbation_contract():
    for seed in range(12):
        fe, fg, a, b = random_calm_perturbation(seed)
        assert abs(a) + abs(b) <= 0.85 + 1e-15
        assert fe(np.zeros(1))[0] == 0.0
        assert fg(np.zeros(1)) is None
        # derivative matches a central difference away from the base
        for xv in (0.3, -0.2, 0.05):
            h = 1e-7
            fd = (fe([xv + h])[0] - fe([xv - h])[0]) / (2 * h)
            assert fg([xv])[0][0] == pytest.approx(fd, abs=1e-6)


def test_random_calm_perturbations_leave_ssrg_positive():
    F, base, ctx = setup_map("identity")
    lad = ladder12()
    for i in range(5):
        fe, fg, a, b = random_calm_perturbation(derive_seed(7, 173, i))
        G = sum_with_function(F, fe, grad=fg, name="identity+calm")
        est = estimate_ssrg(G, base, lad, ctx)
        assert est.reported >= 1.0 - (abs(a) + abs(b)) - 0.05
        assert est.reported >= 0.05


def test_ssr_destabilizer_kills_ssrg_exactly():
    F, base, ctx, lad, p = _build("identity", "ssr", 1.1)
    rep = verify_builder(p, F, base, lad, ctx)
    assert rep.passed
    assert rep.destabilization_ok
    vals = [v for _, v in rep.destabilization]
    assert vals[-1] == 0.0
    # the sum map attains the base value at every anchor
    G = sum_with_function(F, p, name="identity+ssr")
    for xk, _ in p.anchors:
        assert G.membership(xk, base.y, tol=1e-15)


def test_sampled_modulus_stays_below_gamma():
    F, base, ctx, lad, p = _build("xsin", "fclm", 0.1)
    fgraph = make_function_graph(p.eval, grad=p.derivative, dim_x=1, dim_y=1,
                                 kind="l1", name="f")
    fbase = GraphPoint(base.x, np.zeros(1))
    est = estimate_clm(fgraph, fbase, lad, ctx)
    assert est.reported <= 0.1
