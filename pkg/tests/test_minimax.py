import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalebio.minimax import (
    AdamMoments,
    BlockPartition,
    NonFiniteGradientError,
    ScaleBiOState,
    Schedule,
    make_partition,
    run,
    scalebio_step,
)
from scalebio.problems import QuadraticInstance, SamplerConfig, make_quadratic

FULL = SamplerConfig(seed=0, full_batch=True)


def _blocks(part):
    return [b.tolist() for b in part.blocks]


def test_partition_examples():
    assert _blocks(make_partition(4, 1)) == [[0, 1, 2, 3]]
    assert _blocks(make_partition(5, 2)) == [[0, 1, 2], [3, 4]]
    assert _blocks(make_partition(4, 4, "singleton")) == [[0], [1], [2], [3]]
    assert _blocks(make_partition(5, 2, "strided")) == [[0, 2, 4], [1, 3]]


@pytest.mark.parametrize("dim,J,strategy", [(3, 0, "contiguous"), (3, 4, "contiguous"), (4, 2, "singleton"),
                                            (4, 2, "random")])
def test_partition_errors(dim, J, strategy):
    with pytest.raises(ValueError):
        make_partition(dim, J, strategy)


def test_partition_must_cover():
    with pytest.raises(ValueError):
        BlockPartition(3, ([0], [0, 1]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40).flatmap(lambda d: st.tuples(st.just(d), st.integers(1, d))),
       st.sampled_from(["contiguous", "strided"]))
def test_partition_covers_disjointly(dim_j, strategy):
    dim, J = dim_j
    part = make_partition(dim, J, strategy)
    flat = np.concatenate(part.blocks)
    assert sorted(flat.tolist()) == list(range(dim)) and part.J == J
    if strategy == "contiguous":
        sizes = [len(b) for b in part.blocks]
        assert max(sizes) - min(sizes) <= 1


def test_theoretical_schedule_exponents():
    s = Schedule.theoretical(10**7, eta0=3.0, eta0_lambda=2.0)
    assert s.alpha == pytest.approx(10.0, rel=1e-12)
    assert s.eta_u == s.eta_w == pytest.approx(3e-4, rel=1e-12)
    assert s.eta_lambda == pytest.approx(2e-5, rel=1e-12)


def test_practical_schedule():
    s = Schedule.practical(100)
    assert (s.alpha, s.eta_lambda, s.eta_w, s.eta_u, s.rule) == (100.0, 1e-2, 1e-5, 1e-5, "adam")


@pytest.mark.parametrize("kwargs", [dict(total_steps=0), dict(alpha=0.0), dict(eta_w=-1.0), dict(rule="sgdm")])
def test_schedule_validation(kwargs):
    base = dict(total_steps=10, alpha=1.0, eta_u=0.1, eta_w=0.1, eta_lambda=0.1)
    base.update(kwargs)
    with pytest.raises(ValueError):
        Schedule(**base)


def test_theorem_violations_reported(quad):
    ok = Schedule.theoretical(1000, eta0=1e-6, eta0_lambda=1e-12)
    assert Schedule.constant(10, 1, 1, 1, 1).theorem_violations(quad.constants) == [
        "schedule is not in theoretical mode"]
    bad = Schedule.theoretical(1000, eta0=1e3, eta0_lambda=1.0)
    assert any(v.startswith("eta0=") for v in bad.theorem_violations(quad.constants))
    assert not any(v.startswith("eta0=") for v in ok.theorem_violations(quad.constants))


def test_hand_traced_steps(quad1d):
    schedule = Schedule.constant(5, alpha=10, eta_u=1e-2, eta_w=1e-2, eta_lambda=1e-3)
    state = ScaleBiOState.initial(quad1d, init=([0.0], [0.0], [0.0]))
    s1 = scalebio_step(quad1d, state, schedule, FULL)
    assert (s1.u[0], s1.w[0], s1.lam[0]) == (0.0, 0.01, 0.0)
    # Step 2: grad_w L1 = 0.01 - 1, grad_w L2(w) = 0.02 and grad_lam L2(w) = -0.01.
    s2 = scalebio_step(quad1d, s1, schedule, FULL)
    assert s2.u[0] == 0.0
    assert s2.w[0] == pytest.approx(0.0179, abs=1e-15)
    assert s2.lam[0] == pytest.approx(1e-4, abs=1e-16)
    assert state.k == 0 and state.w[0] == 0.0


def test_w_and_u_differ_only_by_outer_gradient(quad):
    schedule = Schedule.constant(5, alpha=7.0, eta_u=0.05, eta_w=0.05, eta_lambda=1e-3)
    state = ScaleBiOState.initial(quad, init=(np.ones(3), np.full(5, 0.3), np.full(5, 0.3)))
    new = scalebio_step(quad, state, schedule, FULL)
    g1w = quad.grad_l1_w(state.lam, state.w)
    np.testing.assert_allclose(new.w - new.u, -0.05 * g1w, atol=1e-15)


def test_lambda_direction_matches_problem(quad):
    schedule = Schedule.constant(20, alpha=10.0, eta_u=0.01, eta_w=0.01, eta_lambda=1e-3)
    state = ScaleBiOState.initial(quad, seed=3)
    for _ in range(10):
        new = scalebio_step(quad, state, schedule, FULL)
        lam, w, u = state.lam, state.w, state.u
        direction = quad.grad_l1_lambda(lam, w) + 10.0 * (quad.grad_l2_lambda(lam, w) - quad.grad_l2_lambda(lam, u))
        np.testing.assert_allclose((lam - new.lam) / 1e-3, direction, rtol=0, atol=1e-12)
        state = new


@pytest.mark.parametrize("rule", ["plain", "adam"])
def test_block_touch_invariance(quad, rule):
    part = make_partition(5, 3)
    schedule = Schedule.constant(50, alpha=5.0, eta_u=0.01, eta_w=0.01, eta_lambda=1e-3, rule=rule)
    state = ScaleBiOState.initial(quad, part, make_partition(5, 2, "strided"), seed=1)
    for _ in range(30):
        new = scalebio_step(quad, state, schedule, FULL)
        j, r = new.last_blocks
        keep_u = np.setdiff1d(np.arange(5), state.partition_u.blocks[j])
        keep_w = np.setdiff1d(np.arange(5), state.partition_w.blocks[r])
        assert np.array_equal(new.u[keep_u], state.u[keep_u])
        assert np.array_equal(new.w[keep_w], state.w[keep_w])
        state = new


def test_block_sampling_is_uniform():
    inst = make_quadratic(1, 4, 1.0, seed=0)
    state = ScaleBiOState.initial(inst, make_partition(4, 4), make_partition(4, 2))
    schedule = Schedule.constant(100_000, 1.0, 1e-6, 1e-6, 1e-6)
    counts_u, counts_w = np.zeros(4), np.zeros(2)
    from scalebio.problems import counter_rng

    # The step draws j then r from the "blocks" stream keyed by k; replay it directly.
    for k in range(100_000):
        rng = counter_rng(0, "blocks", k)
        counts_u[int(rng.integers(4))] += 1
        counts_w[int(rng.integers(2))] += 1
    assert np.all(np.abs(counts_u / 1e5 - 0.25) <= 0.01)
    assert np.all(np.abs(counts_w / 1e5 - 0.5) <= 0.01)
    # ...and the solver really uses that stream.
    for k in range(5):
        new = scalebio_step(inst, dataclasses.replace(state, k=k), schedule, FULL)
        rng = counter_rng(0, "blocks", k)
        assert new.last_blocks == (int(rng.integers(4)), int(rng.integers(2)))


def test_w_only_descent_is_monotone(quad):
    alpha = 5.0
    c = quad.constants
    eta = 1.0 / (c.ell11 + alpha * c.ell21)
    schedule = Schedule.constant(200, alpha, eta, eta, 1e-3)
    lam0 = np.array([0.5, -1.0, 2.0])
    state = ScaleBiOState.initial(quad, init=(lam0, np.ones(5), np.zeros(5)))
    values = []
    for _ in range(100):
        values.append(quad.l1(lam0, state.w) + alpha * quad.l2(lam0, state.w))
        state = dataclasses.replace(scalebio_step(quad, state, schedule, FULL), lam=lam0.copy())
    assert np.all(np.diff(values) <= 1e-12)


def test_runs_are_bit_identical(quad):
    schedule = Schedule.constant(200, 10.0, 0.01, 0.01, 1e-3, rule="adam")
    a = run(quad, schedule, FULL, log_every=7)
    b = run(quad, schedule, FULL, log_every=7)
    for x, y in zip(a.final, b.final):
        assert np.array_equal(x, y)
    assert [r["loss_val"] for r in a.rows] == [r["loss_val"] for r in b.rows]


def test_minibatch_runs_are_bit_identical(two_source_cls):
    from scalebio.models import InnerModel
    from scalebio.reweight import SourceReweightProblem

    prob = SourceReweightProblem(*two_source_cls, InnerModel("logistic_regression", 3, 2))
    cfg = SamplerConfig(4, 4, seed=9)
    schedule = Schedule.constant(50, 10.0, 0.05, 0.05, 0.01, rule="adam")
    a, b = run(prob, schedule, cfg, log_every=10), run(prob, schedule, cfg, log_every=10)
    assert np.array_equal(a.final[0], b.final[0]) and np.array_equal(a.final[1], b.final[1])


def test_run_logging_and_stop(quad):
    schedule = Schedule.constant(25, 10.0, 0.01, 0.01, 1e-3)
    rec = run(quad, schedule, FULL, log_every=10)
    assert rec.column("step").tolist() == [0, 10, 20, 25]
    stopped = run(quad, schedule, FULL, log_every=10, callback=lambda s: s.k == 13)
    assert stopped.column("step").tolist() == [0, 10, 13]
    with pytest.raises(ValueError):
        run(quad, schedule, FULL, log_every=0)


def test_zero_steps_rejected():
    with pytest.raises(ValueError):
        Schedule.constant(0, 1.0, 1.0, 1.0, 1.0)


def test_step_past_schedule_rejected(quad):
    schedule = Schedule.constant(1, 1.0, 0.01, 0.01, 0.01)
    state = scalebio_step(quad, ScaleBiOState.initial(quad), schedule, FULL)
    with pytest.raises(ValueError):
        scalebio_step(quad, state, schedule, FULL)


class _NanAfter(QuadraticInstance):
    def l2_grads(self, lam, w, batch=None):
        if abs(w[0]) > 0.05:
            return np.full(self.dim_lambda, np.nan), np.full(self.dim_w, np.nan)
        return super().l2_grads(lam, w, batch)


def test_nan_aborts_with_partial_record():
    prob = _NanAfter([[2.0]], [[1.0]], [[1.0]], [1.0])
    schedule = Schedule.constant(100, 10.0, 1e-2, 1e-2, 1e-3)
    with pytest.raises(NonFiniteGradientError) as info:
        run(prob, schedule, FULL, init=([0.0], [0.0], [0.0]))
    rec = info.value.record
    assert np.isnan(rec.rows[-1]["loss_val"]) and rec.rows[-1]["step"] == info.value.step + 1
    assert len(rec) >= 2


def test_adam_first_step_is_sign():
    mom = AdamMoments.zeros(4)
    g = np.array([3.0, -0.2, 1e-3, -7.0])
    np.testing.assert_allclose(mom.direction(slice(None), g), np.sign(g), rtol=1e-4)
    other = AdamMoments.zeros(4)
    np.testing.assert_allclose(other.direction(np.arange(4), g), np.sign(g), rtol=1e-4)


def test_adam_block_moments_untouched():
    mom = AdamMoments.zeros(4)
    mom.direction(np.array([0, 1]), np.ones(2))
    assert mom.t.tolist() == [1, 1, 0, 0] and mom.m[2:].tolist() == [0.0, 0.0]
    # Mixed step counts inside one block use per-coordinate bias correction.
    d = mom.direction(np.array([1, 2]), np.array([1.0, 1.0]))
    assert d[1] == pytest.approx(1.0, rel=1e-6)
