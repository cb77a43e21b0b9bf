import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalebio.baselines import conjugate_gradient
from scalebio.models import InnerModel
from scalebio.oracle import (
    QuadraticOracle,
    curvature_probe,
    finite_diff_grad,
    gamma_hessian_alpha_scan,
    ift_hypergrad,
    inner_hessian,
    lemma1_gap_scan,
    loglog_slope,
    reference_hypergrad,
    relative_error,
    scan_table,
    solve_inner,
    write_scan_csv,
    wstar_alpha_distance_check,
)
from scalebio.problems import SourceSpec, gen_sources, make_quadratic, planted_parameter
from scalebio.reweight import HyperCleanProblem


def test_one_dimensional_hypergradient(quad1d):
    oracle = QuadraticOracle(quad1d)
    # F(lam) = (lam/2 - 1)^2 / 2
    assert oracle.outer_value(np.array([0.6])) == pytest.approx(0.5 * (0.3 - 1) ** 2, abs=1e-15)
    assert ift_hypergrad(oracle, [0.0])[0] == pytest.approx(-0.5, abs=1e-15)
    assert ift_hypergrad(oracle, [2.0])[0] == pytest.approx(0.0, abs=1e-15)
    assert oracle.lam_star()[0] == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ift_matches_finite_differences(seed):
    inst = make_quadratic(3, 5, 0.7, seed=seed)
    oracle = QuadraticOracle(inst)
    lam = np.random.default_rng(seed).standard_normal(3)
    assert relative_error(ift_hypergrad(oracle, lam), finite_diff_grad(oracle.outer_value, lam)) < 1e-7


def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda x: 0.5 * x @ x, [3.0, 4.0]), [3.0, 4.0], atol=1e-7)
    assert finite_diff_grad(lambda x: 2.0, [1.0, -5.0]).tolist() == [0.0, 0.0]
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: np.inf, [0.0])


def test_gamma_grad_via_inner_solves(quad):
    oracle = QuadraticOracle(quad)
    alpha = 20.0
    m = quad._ctc + alpha * quad.a_matrix

    def gamma_by_solve(lam):
        # Independent route: CG for w*_alpha and a dense solve for u*.
        w, _, _ = conjugate_gradient(lambda v: m @ v, quad._cty + alpha * quad.b_matrix @ lam, tol=1e-13)
        u = np.linalg.solve(quad.a_matrix, quad.b_matrix @ lam)
        return quad.l1(lam, w) + alpha * (quad.l2(lam, w) - quad.l2(lam, u))

    lam = np.array([0.3, -0.7, 1.1])
    assert gamma_by_solve(lam) == pytest.approx(oracle.gamma(lam, alpha), abs=1e-10)
    assert relative_error(finite_diff_grad(gamma_by_solve, lam), oracle.gamma_grad(lam, alpha)) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.5, 1e4))
def test_gamma_below_outer_and_envelope(seed, alpha):
    inst = make_quadratic(2, 3, 1.0, seed=seed % 7)
    oracle = QuadraticOracle(inst)
    lam = np.random.default_rng(seed).standard_normal(2)
    assert oracle.gamma(lam, alpha) <= oracle.outer_value(lam) + 1e-10 * max(1, abs(oracle.outer_value(lam)))
    assert oracle.value_gap(lam, alpha) >= -1e-12
    wa, us = oracle.wstar_alpha(lam, alpha), oracle.ustar(lam)
    partial = inst.grad_l1_lambda(lam, wa) + alpha * (inst.grad_l2_lambda(lam, wa) - inst.grad_l2_lambda(lam, us))
    np.testing.assert_allclose(oracle.gamma_grad(lam, alpha), partial, rtol=0,
                               atol=1e-8 * max(1.0, np.abs(partial).max()))


def test_ustar_is_stationary(quad):
    oracle = QuadraticOracle(quad)
    for lam in np.random.default_rng(1).standard_normal((10, 3)):
        assert np.linalg.norm(quad.grad_l2_w(lam, oracle.ustar(lam))) <= 1e-10


def test_gap_halves_per_doubling(quad):
    scan = lemma1_gap_scan(QuadraticOracle(quad), np.array([1.0, -0.5, 0.2]), [10, 20, 40, 80])
    for key in ("value_gap", "grad_gap"):
        col = [r[key] for r in scan.rows]
        for a, b in zip(col, col[1:]):
            assert b / a == pytest.approx(0.5, abs=0.1)
    assert -1.15 <= scan.value_slope <= -0.85 and -1.15 <= scan.grad_slope <= -0.85


def test_gap_at_optimum_is_nonnegative(quad):
    oracle = QuadraticOracle(quad)
    lam = oracle.lam_star()
    scan = lemma1_gap_scan(oracle, lam, [10, 100])
    assert oracle.value_gap(lam, 10) >= 0 and scan.rows[0]["value_gap"] >= 0


def test_gap_ratio_over_five_decades(quad):
    scan = lemma1_gap_scan(QuadraticOracle(quad), np.array([1.0, 2.0, -1.0]), [10, 1e6])
    assert scan.rows[1]["value_gap"] / scan.rows[0]["value_gap"] <= 1.1e-5
    assert scan.rows[1]["grad_gap"] / scan.rows[0]["grad_gap"] <= 1.1e-5


def test_gap_scan_rejects_small_alpha(quad):
    thr = 2 * quad.constants.ell11 / quad.constants.mu2
    with pytest.raises(ValueError, match="2\\*ell11/mu2"):
        lemma1_gap_scan(QuadraticOracle(quad), np.zeros(3), [thr / 2, 10])


def test_wstar_distance_one_dimensional(quad1d):
    rows = wstar_alpha_distance_check(QuadraticOracle(quad1d), np.array([0.0]), [1, 10, 100])
    for r in rows:
        assert r["wdist"] == pytest.approx(1 / (1 + 2 * r["alpha"]), rel=1e-14)
        assert r["within"]


def test_wstar_distance_bound_and_limit(quad):
    oracle = QuadraticOracle(quad)
    c0 = quad.constants.c0
    for lam in np.random.default_rng(2).standard_normal((20, 3)):
        rows = wstar_alpha_distance_check(oracle, lam, [10, 1e2, 1e3, 1e4])
        assert all(r["within"] for r in rows)
        assert all(r["wdist"] * r["alpha"] <= 1.05 * c0 for r in rows)
    far = wstar_alpha_distance_check(oracle, np.ones(3), [1e12])[0]
    assert far["wdist"] < 1e-9


def test_wstar_distance_rejects_outside_region(quad):
    with pytest.raises(ValueError, match="region"):
        wstar_alpha_distance_check(QuadraticOracle(quad), np.full(3, 100.0), [10])


def test_curvature_probe(quad):
    c = quad.constants
    lam = np.ones(3)
    rep = curvature_probe(quad, lam, 4 * c.ell11 / c.mu2, trials=100)
    assert rep.violations == 0 and rep.convexity_checked and rep.status == "ok"
    low = curvature_probe(quad, lam, 0.5 * c.ell11 / c.mu2, trials=100)
    assert not low.convexity_checked and "skipped" in low.status
    assert low.concavity_violations == 0


def test_curvature_probe_detects_wrong_modulus(quad):
    class Overclaim:
        def __init__(self, inst):
            self.__dict__.update(vars(inst))
            self.constants = type(inst.constants)(mu2=10 * inst.constants.mu2, ell10=1, ell11=inst.constants.ell11,
                                                  ell21=1)
            self.l1, self.l2 = inst.l1, inst.l2
            self.dim_w = inst.dim_w

    rep = curvature_probe(Overclaim(quad), np.ones(3), 100.0, trials=50)
    assert rep.concavity_violations > 0


def test_hessian_spread(quad):
    norms, spread = gamma_hessian_alpha_scan(QuadraticOracle(quad))
    assert len(norms) == 3 and spread < 0.1


def test_scan_csv(tmp_path, quad):
    rows = scan_table(QuadraticOracle(quad), np.ones(3), [10, 20])
    path = write_scan_csv(rows, tmp_path / "scan.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "alpha,value_gap,grad_gap,wdist,wbound" and len(lines) == 3
    assert float(lines[1].split(",")[0]) == 10.0


def test_loglog_slope():
    xs = np.array([1.0, 10.0, 100.0])
    assert loglog_slope(xs, 3 / xs) == pytest.approx(-1.0)


def test_reference_hypergrad_matches_closed_form(quad):
    oracle = QuadraticOracle(quad)
    lam = np.array([0.4, -0.1, 0.9])
    ref, w = reference_hypergrad(quad, lam)
    np.testing.assert_allclose(w, oracle.wstar(lam), atol=1e-8)
    assert relative_error(ref, oracle.hypergrad(lam)) < 1e-6


def test_reference_hypergrad_matches_fd_on_hyperclean():
    wp = planted_parameter(3, 0, num_classes=2)
    train = gen_sources([SourceSpec(12, wp, corruption=0.3)], seed=0)
    val = gen_sources([SourceSpec(10, wp)], seed=1)
    prob = HyperCleanProblem(train, val, InnerModel("logistic_regression", 3, 2), c=0.05)
    lam = np.random.default_rng(0).standard_normal(12)
    ref, _ = reference_hypergrad(prob, lam)

    def outer(x):
        w = solve_inner(prob, x, gtol=1e-12)
        for _ in range(3):  # Newton polish so the difference quotient sees an exact minimizer
            w = w - np.linalg.solve(prob.l2_hessian_ww(x, w), prob.grad_l2_w(x, w))
        return prob.l1(x, w)

    fd = finite_diff_grad(outer, lam, h=1e-4)
    assert relative_error(ref, fd) < 1e-6
    w = solve_inner(prob, lam)
    np.testing.assert_allclose(inner_hessian(prob, lam, w), inner_hessian(prob, lam, w, analytic=False), atol=1e-6)
