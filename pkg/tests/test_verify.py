import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densityctl.datamodel import (
    ExperimentData,
    NoiseModel,
    PriorKnowledge,
    SystemStructure,
    assemble_data_matrices,
    build_uncertainty_quadric,
    vectorize,
)
from densityctl.parser import parse_poly
from densityctl.polynomial import Polynomial, poly_array
from densityctl.sim import IntegrationBlowup, integrate
from densityctl.slemma import LinearFunctional, min_linear_over_zset, slemma_nonstrict, zset_point
from densityctl.synthesis import RationalController
from densityctl.verify import (
    NotCertified,
    build_L_scaled,
    build_Q,
    closed_loop_field,
    corollary5_certify,
    corollary6_certify,
    default_grid,
    explicit_multiplier,
    model_based_lyapunov_check,
    pointwise_thm3,
    prop4_certify,
    prop4_pointwise,
)


def Px(t):
    return parse_poly(t, ["x"])


def scalar_struct():
    return SystemStructure([Px("x")], [[Px("1")]])


def fixed(arr):
    return [e.constant_part() for e in arr]


# aL and Q --------------------------------------------------------------------------------------


def test_scalar_scaled_L():
    ctrl = RationalController(Px("1"), [Px("-2*x + x^3")])
    aL = fixed(build_L_scaled(Px("x^2"), scalar_struct(), ctrl))
    assert aL[0] == Px("-2*x^2")
    assert aL[1] == Px("-2*x*(-2*x + x^3)")


def test_zero_lyapunov_gives_zero_L(ex1):
    cfg = ex1.cfg
    aL = build_L_scaled(Polynomial.zero(2), cfg.struct, cfg.fixture_controller("ac"))
    assert all(e.is_zero() for e in aL)


def test_scalar_Q():
    ctrl = RationalController(Px("2"), [Px("-x")])
    Q = build_Q(scalar_struct(), ctrl)
    assert Q.shape == (2, 1)
    assert Q[0, 0] == Px("-2*x") and Q[1, 0] == Px("x")


def test_second_example_Q_shape(ex2):
    assert build_Q(ex2.cfg.struct, ex2.cfg.fixture_controller("ac")).shape == (8, 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_scaled_L_is_Q_times_gradient(seed):
    rng = np.random.default_rng(seed)
    names = ["x1", "x2"]
    P = lambda t: parse_poly(t, names)
    struct = SystemStructure([P("x1"), P("x2"), P("x1^2")], [[P("1")]])
    ctrl = RationalController(P(f"{1 + rng.uniform():.5f}"), [P(f"{rng.normal():.5f}*x1 - x2^2")])
    coefs = rng.normal(size=3)
    V = P(f"{coefs[0]:.6f}*x1^2 + {coefs[1]:.6f}*x1*x2 + {coefs[2]:.6f}*x2^4")
    aL = fixed(build_L_scaled(V, struct, ctrl))
    Q = build_Q(struct, ctrl)
    grad = V.gradient()
    for r in range(Q.shape[0]):
        expect = sum((Q[r, i] * grad[i] for i in range(2)), Polynomial.zero(2))
        assert aL[r].allclose(expect, atol=1e-12)


def test_printed_certificate_decreases_along_true_loop(ex1):
    cfg = ex1.cfg
    ctrl = cfg.fixture_controller("K")
    V = cfg.poly(cfg.fixtures["V"])
    aL = fixed(build_L_scaled(V, cfg.struct, ctrl))
    v = vectorize(cfg.truth.A, cfg.truth.B)
    field = closed_loop_field(cfg.struct, cfg.truth.A, cfg.truth.B, ctrl)
    grad = V.gradient()
    rng = np.random.default_rng(0)
    for x in rng.uniform(-2, 2, (100, 2)):
        lhs = sum(p.eval(x) * vi for p, vi in zip(aL, v))
        vdot = sum(g.eval(x) * fi for g, fi in zip(grad, field(0.0, x)))
        assert lhs == pytest.approx(-ctrl.a.eval(x) * vdot, rel=1e-9, abs=1e-12)
        assert lhs > 0


# certificates on the first example --------------------------------------------------------------------


def test_full_size_certificate(ex1):
    ver = ex1.verify("cor5", 2)
    cert = ver.certificate
    assert cert.matrix_size == 7 and cert.deg_v == 2
    assert cert.V.coefficient((0, 0)) == 0.0
    assert cert.report.ok and ver.pointwise.ok
    d = cert.to_dict()
    assert d["method"] == "cor5"


def test_printed_controller_is_certified(ex1):
    ver = ex1.verify("cor5", 2, ctrl=ex1.cfg.fixture_controller("K"), tag="fixture")
    assert ver.pointwise.ok


def test_open_loop_is_not_certified(ex1):
    cfg = ex1.cfg
    zero = RationalController(cfg.poly("1"), [cfg.poly("0")])
    with pytest.raises(NotCertified):
        corollary5_certify(cfg.struct, ex1.problem.quadric, cfg.prior, zero, 2)
    # oracle: the true system, a member of the data-consistent set, escapes without control
    field = closed_loop_field(cfg.struct, cfg.truth.A, cfg.truth.B, zero)
    with pytest.raises(IntegrationBlowup):
        integrate(field, [1.0, 1.0], (0.0, 10.0), 1e-3)


def test_constant_lyapunov_degree_is_not_certified(ex1):
    cfg = ex1.cfg
    with pytest.raises(NotCertified):
        corollary5_certify(cfg.struct, ex1.problem.quadric, cfg.prior, ex1.synthesis.controller, 0)


@pytest.mark.parametrize("deg", [-2, 3])
def test_bad_degree_rejected(ex1, deg):
    cfg = ex1.cfg
    with pytest.raises(ValueError):
        corollary5_certify(cfg.struct, ex1.problem.quadric, cfg.prior, ex1.synthesis.controller, deg)


def test_margin_must_be_positive(ex1):
    cfg = ex1.cfg
    with pytest.raises(ValueError):
        corollary5_certify(cfg.struct, ex1.problem.quadric, cfg.prior, ex1.synthesis.controller, 2,
                           eps=cfg.poly("1e-4*x1^2"))


def test_corrupted_lyapunov_fails_pointwise(ex1):
    cert = ex1.verify("cor5", 2).certificate
    mono = (2, 0)
    bad = Polynomial(2, {**cert.V.terms, mono: -cert.V.terms[mono]})
    grid = default_grid(2)
    rep = pointwise_thm3(ex1.problem.quadric, ex1.cfg.prior, ex1.cfg.struct, ex1.synthesis.controller,
                         bad, cert.beta, grid)
    assert not rep.ok and rep.violations.size > 0


def test_multiplier_route_costs_more(ex1):
    full = ex1.verify("cor5", 2).certificate
    mult = ex1.verify("prop4", 2)
    assert mult.pointwise.ok
    assert mult.certificate.n_decision_vars > full.n_decision_vars


def test_zero_multiplier_is_infeasible(ex1):
    cfg = ex1.cfg
    with pytest.raises(NotCertified):
        prop4_certify(cfg.struct, ex1.problem.quadric, cfg.prior, ex1.synthesis.controller, 2,
                      gamma_zero=True)


def test_explicit_multiplier_closes_the_gap(ex1):
    cert = ex1.verify("cor5", 2).certificate
    cfg, q = ex1.cfg, ex1.problem.quadric
    grid = default_grid(2)
    gam, _, _ = explicit_multiplier(q, cfg.prior, cfg.struct, ex1.synthesis.controller, cert.V, grid)
    assert np.all(gam >= -1e-9)
    assert prop4_pointwise(q, cfg.prior, cfg.struct, ex1.synthesis.controller, cert.V, cert.beta, grid).ok


def test_lemma_verdicts_match_closed_form_on_grid(ex1):
    cert = ex1.verify("cor5", 2).certificate
    cfg, q = ex1.cfg, ex1.problem.quadric
    ctrl = ex1.synthesis.controller
    aL = fixed(build_L_scaled(cert.V, cfg.struct, ctrl))
    s0, sb0 = cfg.prior.s0, cfg.prior.sbar0
    for x in default_grid(2, per_axis=11):
        vals = np.array([p.eval(x) for p in aL])
        known = vals[s0] @ cfg.prior.pinned_values if s0.size else 0.0
        fnl = LinearFunctional(vals[sb0], known - cert.beta.eval(x))
        m = min_linear_over_zset(q, fnl)
        assert m > -1e-7
        if abs(m) > 1e-8:
            assert slemma_nonstrict(q, fnl) == (m >= 0)


# the second example ------------------------------------------------------------------------------------


def test_reduced_and_full_routes_agree(ex2):
    red, full = ex2.verify("cor6", 4), ex2.verify("cor5", 4)
    assert red.certificate.matrix_size == 3
    assert full.certificate.matrix_size == 5
    assert red.pointwise.ok and full.pointwise.ok


# a single-state toy --------------------------------------------------------------------------------------


def toy_problem():
    struct = scalar_struct()
    data = ExperimentData([0.0, 1.0], [[1.0, -0.5]], [[1.0, 0.5]], [[0.5, 1.0]])  # two excited samples
    Xd, Fd, GU = assemble_data_matrices(struct, data)
    q = build_uncertainty_quadric(Xd, Fd, GU, NoiseModel.pointwise(0.01, 1, 2), PriorKnowledge.none(1, 1, 1))
    return struct, q


def test_single_state_reduced_matrix_is_two():
    struct, q = toy_problem()
    ctrl = RationalController(Px("1"), [Px("-5*x")])
    cert = corollary6_certify(struct, q, PriorKnowledge.none(1, 1, 1), ctrl, 2)
    assert cert.matrix_size == 2
    full = corollary5_certify(struct, q, PriorKnowledge.none(1, 1, 1), ctrl, 2)
    assert full.matrix_size == 3


# model-based check --------------------------------------------------------------------------------------------


def test_model_based_stable_scalar():
    assert model_based_lyapunov_check(poly_array([Px("-x")]), Px("x^2"), Px("x^2")).ok


def test_model_based_unstable_scalar():
    assert not model_based_lyapunov_check(poly_array([Px("x")]), Px("x^2"), Px("1e-6*x^2")).ok


def test_model_based_dimension_mismatch():
    with pytest.raises(ValueError):
        model_based_lyapunov_check(poly_array([Px("x"), Px("x")]), Px("x^2"), Px("x^2"))


def _known_model_fixture():
    P = lambda t: parse_poly(t, ["x1", "x2"])
    K = P("-2*x1 - 2*x2 + 2*x1^2 + 2*x1*x2 - 2*x1^3")
    return poly_array([P("x2 - x1^2"), K]), P("x1^2 + (x1 + x2 - x1^2)^2"), P


def test_known_model_decrease_is_exactly_twice_V():
    f, V, _ = _known_model_fixture()
    g = V.gradient()
    assert (g[0] * f[0] + g[1] * f[1] + V * 2.0).is_zero()


def test_known_model_certified_with_margin_proportional_to_V():
    f, V, _ = _known_model_fixture()
    assert model_based_lyapunov_check(f, V, V.scale(1e-6), tol=1e-8).ok


def test_known_model_quadratic_margin_fails_far_out():
    # along x2 = x1^2 - x1 the decrease 2V = 2 x1^2 grows slower than |x|^2 ~ x1^4
    f, V, P = _known_model_fixture()
    x = np.array([2000.0, 2000.0 ** 2 - 2000.0])
    assert 2 * V.eval(x) - 1e-6 * (x @ x) < 0
