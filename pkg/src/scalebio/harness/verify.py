"""Invariant suite: every property check plus a gradient-check sweep over the
built-in problems, reported one row per invariant."""

from __future__ import annotations

import numpy as np

from ..baselines import (
    BaselineConfig,
    HvpOracle,
    cg_hypergrad,
    neumann_correction,
    reverse_hypergrad,
    stocbio_hypergrad,
)
from ..minimax import ScaleBiOState, Schedule, make_partition, scalebio_step
from ..models import InnerModel
from ..oracle import QuadraticOracle, finite_diff_grad, ift_hypergrad, relative_error
from ..problems import (
    SamplerConfig,
    SourceSpec,
    counter_rng,
    gen_sources,
    make_quadratic,
    planted_parameter,
    sample_batch,
)
from ..reweight import HyperCleanProblem, SourceReweightProblem, softmax
from .config import ExperimentConfig
from .presets import ExperimentReport, _out_dir, _write_rows, run_quad_verify

GRAD_TOL = 1e-5
GRAD_POINTS = 20
CONVEXITY_SEGMENTS = 50


def builtin_problems(seed=0):
    """Small instances of every built-in problem family, sized for finite differences."""
    d = 4
    w_a = planted_parameter(d, [seed, 1])
    w_b = planted_parameter(d, [seed, 2])
    reg_train = gen_sources([SourceSpec(30, w_a, task="regression", noise_std=0.3),
                             SourceSpec(20, w_b, task="regression", noise_std=0.3, corruption=0.2)], seed)
    reg_val = gen_sources([SourceSpec(25, w_a, task="regression", noise_std=0.3)], seed + 1)

    w_c = planted_parameter(d, [seed, 3], num_classes=3)
    cls_train = gen_sources([SourceSpec(30, w_c), SourceSpec(20, w_c, corruption=0.5)], seed)
    cls_val = gen_sources([SourceSpec(25, w_c)], seed + 1)
    hc_train = gen_sources([SourceSpec(40, w_c, corruption=0.3)], seed)

    w_m = planted_parameter(3, [seed, 4], num_classes=2)
    mlp_train = gen_sources([SourceSpec(20, w_m), SourceSpec(20, w_m, corruption=0.5)], seed)
    mlp_val = gen_sources([SourceSpec(20, w_m)], seed + 1)

    return {
        "quadratic": make_quadratic(3, 5, 1.0, seed=seed),
        "reweight_linear": SourceReweightProblem(reg_train, reg_val, InnerModel("linear_regression", d, ridge=1e-2)),
        "reweight_logistic": SourceReweightProblem(cls_train, cls_val, InnerModel("logistic_regression", d, 3,
                                                                                  ridge=1e-2)),
        "reweight_mlp1": SourceReweightProblem(mlp_train, mlp_val, InnerModel("mlp1", 3, 2, ridge=1e-2)),
        "hyperclean_logistic": HyperCleanProblem(hc_train, cls_val, InnerModel("logistic_regression", d, 3)),
    }


def _point(problem, seed, i):
    rng = counter_rng(seed, "verify-point", i)
    return rng.standard_normal(problem.dim_lambda), 0.5 * rng.standard_normal(problem.dim_w)


def _grad_error(g, fd):
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-6))


def gradient_check(problem, seed=0, points=GRAD_POINTS):
    """Worst relative error of the four analytic gradient blocks against
    central differences over ``points`` random ``(lambda, w)``."""
    worst = 0.0
    for i in range(points):
        lam, w = _point(problem, seed, i)
        g1l, g1w = problem.l1_grads(lam, w)
        g2l, g2w = problem.l2_grads(lam, w)
        pairs = [
            (g1l, finite_diff_grad(lambda x: problem.l1(x, w), lam)),
            (g1w, finite_diff_grad(lambda x: problem.l1(lam, x), w)),
            (g2l, finite_diff_grad(lambda x: problem.l2(x, w), lam)),
            (g2w, finite_diff_grad(lambda x: problem.l2(lam, x), w)),
        ]
        for g, fd in pairs:
            if g.shape != fd.shape:
                return float("inf")
            worst = max(worst, _grad_error(g, fd))
    return worst


def convexity_probe(problem, seed=0, segments=CONVEXITY_SEGMENTS):
    """Count violations of the mu2 strong-convexity segment inequality of L2(lam, .)."""
    mu2 = problem.constants.mu2
    bad = 0
    for i in range(segments):
        rng = counter_rng(seed, "verify-convexity", i)
        lam = rng.standard_normal(problem.dim_lambda)
        w1, w2 = rng.standard_normal(problem.dim_w), rng.standard_normal(problem.dim_w)
        t = rng.uniform(0.05, 0.95)
        lhs = problem.l2(lam, t * w1 + (1 - t) * w2)
        rhs = t * problem.l2(lam, w1) + (1 - t) * problem.l2(lam, w2) - mu2 * t * (1 - t) * float((w1 - w2) @ (w1 - w2)) / 2
        bad += lhs > rhs + 1e-9
    return bad


def _deterministic_data(seed):
    w = planted_parameter(3, [seed, 9], num_classes=2)
    a = gen_sources([SourceSpec(50, w, corruption=0.3), SourceSpec(40, w)], seed)
    b = gen_sources([SourceSpec(50, w, corruption=0.3), SourceSpec(40, w)], seed)
    same = np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels) \
        and np.array_equal(a.corrupted_mask, b.corrupted_mask)
    cfg = SamplerConfig(16, 16, seed=seed)
    same &= all(sample_batch(a, cfg, "train", k) == sample_batch(b, cfg, "train", k) for k in range(20))
    return bool(same)


def _reweight_checks(report, tag, problem, seed):
    worst_shift = worst_zero = worst_sum = 0.0
    for i in range(10):
        lam, w = _point(problem, seed, 100 + i)
        shift = 3.7
        g_a = problem.l2_grads(lam, w)[1]
        g_b = problem.l2_grads(lam + shift, w)[1]
        worst_shift = max(worst_shift, float(np.max(np.abs(softmax(lam) - softmax(lam + shift)))),
                          abs(problem.l2(lam, w) - problem.l2(lam + shift, w)),
                          float(np.max(np.abs(g_a - g_b))))
        worst_zero = max(worst_zero, float(np.max(np.abs(problem.l1_grads(lam, w)[0]))))
        worst_sum = max(worst_sum, abs(float(problem.l2_grads(lam, w)[0].sum())))
    report.check(f"reweight_shift_invariance[{tag}]", worst_shift <= 1e-12, worst_shift, "<= 1e-12")
    report.check(f"reweight_outer_lambda_grad_zero[{tag}]", worst_zero == 0.0, worst_zero, "== 0")
    report.check(f"reweight_lambda_grad_sums_to_zero[{tag}]", worst_sum <= 1e-12, worst_sum, "<= 1e-12")
    ridge = problem.model.ridge
    worst_curv = np.inf
    for i in range(10):
        lam, w = _point(problem, seed, 200 + i)
        v = counter_rng(seed, "verify-direction", i).standard_normal(problem.dim_w)
        v /= np.linalg.norm(v)
        hv = HvpOracle().hvp_ww(problem, lam, w, v)
        worst_curv = min(worst_curv, float(v @ hv))
    report.check(f"reweight_ridge_curvature[{tag}]", worst_curv >= ridge * (1 - 1e-4), worst_curv, f">= {ridge:g}")


def _oracle_checks(report, inst, seed):
    oracle = QuadraticOracle(inst)
    env = gam = ift = 0.0
    for i in range(10):
        lam = counter_rng(seed, "verify-oracle", i).standard_normal(inst.dim_lambda)
        for alpha in (10.0, 100.0):
            wa, us = oracle.wstar_alpha(lam, alpha), oracle.ustar(lam)
            partial = inst.grad_l1_lambda(lam, wa) + alpha * (inst.grad_l2_lambda(lam, wa) - inst.grad_l2_lambda(lam, us))
            env = max(env, float(np.linalg.norm(partial - oracle.gamma_grad(lam, alpha))))
            gam = max(gam, oracle.gamma(lam, alpha) - oracle.outer_value(lam))
        fd = finite_diff_grad(oracle.outer_value, lam)
        ift = max(ift, relative_error(ift_hypergrad(oracle, lam), fd))
    report.check("envelope_identity", env <= 1e-8, env, "<= 1e-8")
    report.check("gamma_below_outer", gam <= 1e-12, gam, "<= 1e-12 (max Gamma - F)")
    report.check("ift_vs_finite_differences", ift < 1e-7, ift, "< 1e-7 relative")
    closed = max(float(np.linalg.norm(inst.grad_l2_w(lam, inst.wstar(lam))))
                 for lam in (counter_rng(seed, "verify-wstar", i).standard_normal(inst.dim_lambda) for i in range(10)))
    report.check("quadratic_inner_stationarity", closed <= 1e-10, closed, "<= 1e-10")


def _baseline_checks(report, inst, seed):
    oracle = QuadraticOracle(inst)
    hvp_a, hvp_f = HvpOracle("analytic"), HvpOracle("finite_difference")
    worst_hvp = 0.0
    for i in range(20):
        rng = counter_rng(seed, "verify-hvp", i)
        lam, w, v = rng.standard_normal(inst.dim_lambda), rng.standard_normal(inst.dim_w), rng.standard_normal(inst.dim_w)
        for a, f in zip(hvp_a.both(inst, lam, w, v), hvp_f.both(inst, lam, w, v)):
            worst_hvp = max(worst_hvp, relative_error(a, f))
    report.check("hvp_fd_vs_analytic", worst_hvp < 1e-5, worst_hvp, "< 1e-5 relative")

    lam = counter_rng(seed, "verify-estimators", 0).standard_normal(inst.dim_lambda)
    truth = oracle.hypergrad(lam)
    ell21 = inst.constants.ell21
    base = dict(inner_steps=400, inner_step_size=1.0 / ell21)
    est = {
        "stocbio": stocbio_hypergrad(inst, lam, BaselineConfig(**base, neumann_terms=500, neumann_scale=0.4 / ell21), hvp_a),
        "cg": cg_hypergrad(inst, lam, BaselineConfig(**base, cg_tol=1e-10), hvp_a),
        "reverse": reverse_hypergrad(inst, lam, BaselineConfig(**base), hvp_a),
    }
    worst = max(float(np.max(np.abs(g - truth))) for g in est.values())
    report.check("estimators_vs_closed_form", worst <= 1e-5, worst, "<= 1e-5")

    w = oracle.wstar(lam)
    _, g1w = inst.l1_grads(lam, w)
    eta = 0.4 / ell21
    _, partial = neumann_correction(inst, lam, w, -g1w, 60, eta, hvp_a)
    diffs = [np.linalg.norm(b - a) for a, b in zip(partial, partial[1:])]
    rate = 1 - eta * inst.constants.mu2
    excess = max(d2 - (rate * d1 + 1e-12) for d1, d2 in zip(diffs, diffs[1:]))
    report.check("neumann_cauchy", excess <= 0, excess, "<= 0 (contraction excess)")


def _solver_checks(report, inst, seed):
    J = 2
    state = ScaleBiOState.initial(inst, make_partition(inst.dim_w, J), make_partition(inst.dim_w, J), seed=seed)
    schedule = Schedule.constant(50, 10.0, 1e-2, 1e-2, 1e-3)
    sampler = SamplerConfig(seed=seed, full_batch=True)
    touched_ok = True
    for _ in range(20):
        new = scalebio_step(inst, state, schedule, sampler)
        j, r = new.last_blocks
        out_u = np.setdiff1d(np.arange(inst.dim_w), state.partition_u.blocks[j])
        out_w = np.setdiff1d(np.arange(inst.dim_w), state.partition_w.blocks[r])
        touched_ok &= np.array_equal(new.u[out_u], state.u[out_u]) and np.array_equal(new.w[out_w], state.w[out_w])
        state = new
    report.check("block_touch_invariance", touched_ok, float(touched_ok), "== 1")

    state = ScaleBiOState.initial(inst, seed=seed)
    worst = 0.0
    for _ in range(10):
        new = scalebio_step(inst, state, schedule, sampler)
        lam, w, u = state.lam, state.w, state.u
        direction = inst.grad_l1_lambda(lam, w) + schedule.alpha * (inst.grad_l2_lambda(lam, w) - inst.grad_l2_lambda(lam, u))
        worst = max(worst, float(np.max(np.abs((lam - new.lam) / schedule.eta_lambda - direction))))
        state = new
    report.check("lambda_direction_j1", worst <= 1e-12 * max(1.0, float(np.max(np.abs(direction)))), worst,
                 "<= 1e-12 (scaled)")


def run_verify(cfg: ExperimentConfig, extra_problems=None, include_quad=True) -> ExperimentReport:
    """Run every invariant; ``extra_problems`` (name -> problem) joins the
    gradient sweep, which is how tests inject a deliberately broken gradient."""
    out = _out_dir(cfg)
    seed = cfg.seed
    if include_quad:
        report = run_quad_verify(cfg)
        report.preset = "verify"
    else:
        report = ExperimentReport("verify", seed)

    problems = builtin_problems(seed)
    problems.update(extra_problems or {})
    for name, problem in problems.items():
        err = gradient_check(problem, seed)
        report.check(f"gradient_check[{name}]", err < GRAD_TOL, err, f"< {GRAD_TOL:g} relative")
    for name, problem in problems.items():
        if problem.constants is None:
            continue
        bad = convexity_probe(problem, seed)
        report.check(f"strong_convexity[{name}]", bad == 0, bad, "== 0 violations")

    report.check("data_determinism", _deterministic_data(seed), 1.0, "bit-identical regeneration")
    p = softmax(counter_rng(seed, "verify-softmax", 0).standard_normal(6))
    report.check("softmax_simplex", abs(p.sum() - 1) <= 1e-12 and p.min() > 0, abs(p.sum() - 1), "<= 1e-12")
    for name in ("reweight_linear", "reweight_logistic"):
        _reweight_checks(report, name, problems[name], seed)
    inst = problems["quadratic"]
    _oracle_checks(report, inst, seed)
    _baseline_checks(report, inst, seed)
    _solver_checks(report, inst, seed)

    rows = [dict(invariant=v.name, passed=int(v.passed), value=v.value, threshold=v.threshold)
            for v in report.verdicts]
    report.artifacts["verify"] = str(_write_rows(out / "verify.csv", ["invariant", "passed", "value", "threshold"],
                                                 rows))
    report.write(out)
    return report
