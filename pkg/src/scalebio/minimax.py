"""Single-loop stochastic minimax solver with randomized block-coordinate
updates of the inner variables.

The solver minimizes over ``(lambda, w)`` and maximizes over ``u`` the penalty
objective ``L1(lambda, w) + alpha * (L2(lambda, w) - L2(lambda, u))``.  Each
step updates one random block of ``u``, one random block of ``w`` and all of
``lambda``, every update using the iterate from the start of the step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .problems import BilevelProblem, ProblemConstants, SamplerConfig, counter_rng
from .records import RunRecord
from .reweight import softmax

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteGradientError(FloatingPointError):
    """A gradient evaluated to NaN or inf; carries the partial trajectory."""

    def __init__(self, step, which, record=None):
        super().__init__(f"non-finite {which} at step {step}")
        self.step = step
        self.which = which
        self.record = record


@dataclass(frozen=True)
class BlockPartition:
    dim: int
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=np.int64) for b in self.blocks)
        if not blocks:
            raise ValueError("a partition needs at least one block")
        if any(len(b) == 0 for b in blocks):
            raise ValueError("blocks must be nonempty")
        flat = np.concatenate(blocks)
        if len(flat) != self.dim or not np.array_equal(np.sort(flat), np.arange(self.dim)):
            raise ValueError("blocks must be disjoint and cover 0..dim-1")
        object.__setattr__(self, "blocks", blocks)

    @property
    def J(self) -> int:
        return len(self.blocks)


def make_partition(dim, J, strategy="contiguous") -> BlockPartition:
    """Split ``range(dim)`` into ``J`` blocks.

    ``contiguous`` gives runs whose sizes differ by at most one, ``strided``
    puts index ``i`` in block ``i % J`` and ``singleton`` (``J == dim``) gives one
    coordinate per block.
    """
    if not 1 <= J <= dim:
        raise ValueError(f"need 1 <= J <= dim, got J={J}, dim={dim}")
    idx = np.arange(dim)
    if strategy == "contiguous":
        blocks = np.array_split(idx, J)
    elif strategy == "strided":
        blocks = [idx[j::J] for j in range(J)]
    elif strategy == "singleton":
        if J != dim:
            raise ValueError("singleton partition requires J == dim")
        blocks = [idx[i:i + 1] for i in range(dim)]
    else:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    return BlockPartition(dim, tuple(blocks))


@dataclass(frozen=True)
class Schedule:
    """Penalty and step sizes.

    ``rule="adam"`` routes each raw update direction through bias-corrected
    moment averages before scaling by its step size.
    """

    total_steps: int
    alpha: float
    eta_u: float
    eta_w: float
    eta_lambda: float
    mode: str = "constant"
    rule: str = "plain"
    eta0: Optional[float] = None
    eta0_lambda: Optional[float] = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")
        for name in ("alpha", "eta_u", "eta_w", "eta_lambda"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("constant", "theoretical"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.rule not in ("plain", "adam"):
            raise ValueError(f"unknown update rule {self.rule!r}")

    @classmethod
    def theoretical(cls, total_steps, eta0, eta0_lambda, rule="plain"):
        """``alpha = K^(1/7)``, ``eta_u = eta_w = eta0 / K^(4/7)``,
        ``eta_lambda = eta0_lambda / K^(5/7)``."""
        k = float(total_steps)
        return cls(
            total_steps=total_steps,
            alpha=k ** (1 / 7),
            eta_u=eta0 / k ** (4 / 7),
            eta_w=eta0 / k ** (4 / 7),
            eta_lambda=eta0_lambda / k ** (5 / 7),
            mode="theoretical",
            rule=rule,
            eta0=eta0,
            eta0_lambda=eta0_lambda,
        )

    @classmethod
    def constant(cls, total_steps, alpha, eta_u, eta_w, eta_lambda, rule="plain"):
        return cls(total_steps, alpha, eta_u, eta_w, eta_lambda, rule=rule)

    @classmethod
    def practical(cls, total_steps, alpha=100.0, eta_model=1e-5, eta_lambda=1e-2):
        """Large-model preset: adaptive moments, penalty 100, weights rate 1e-2,
        model rate 1e-5."""
        return cls(total_steps, alpha, eta_model, eta_model, eta_lambda, rule="adam")

    def theorem_violations(self, constants: ProblemConstants, J=1, ell_gamma=None):
        """Conditions of the convergence guarantee that this schedule breaks.

        The ``eta0_lambda <= 1/(8 ell_gamma)`` condition is checked only when
        ``ell_gamma`` is supplied.
        """
        out = []
        if self.mode != "theoretical":
            return ["schedule is not in theoretical mode"]
        mu2, kappa = constants.mu2, constants.kappa
        if self.alpha < constants.ell11 / mu2:
            out.append(f"alpha={self.alpha:.4g} < ell11/mu2={constants.ell11 / mu2:.4g}")
        if self.eta0 > 8 * J / mu2:
            out.append(f"eta0={self.eta0:.4g} > 8J/mu2={8 * J / mu2:.4g}")
        bound = 6 * math.sqrt(2) * kappa**2 * J
        if self.eta0 / self.eta0_lambda < bound:
            out.append(f"eta0/eta0_lambda={self.eta0 / self.eta0_lambda:.4g} < 6*sqrt(2)*kappa^2*J={bound:.4g}")
        if ell_gamma is not None and self.eta0_lambda > 1 / (8 * ell_gamma):
            out.append(f"eta0_lambda={self.eta0_lambda:.4g} > 1/(8 ell_gamma)={1 / (8 * ell_gamma):.4g}")
        return out


@dataclass
class AdamMoments:
    """Per-coordinate first/second moments with per-coordinate step counts,
    so untouched blocks keep their state."""

    m: np.ndarray
    v: np.ndarray
    t: np.ndarray

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim), np.zeros(dim), np.zeros(dim, dtype=np.int64))

    def copy(self):
        return AdamMoments(self.m.copy(), self.v.copy(), self.t.copy())

    def direction(self, idx, grad):
        """Update moments on ``idx`` in place and return the scaled direction."""
        if isinstance(idx, slice):
            return self._direction_view(idx, grad)
        self.t[idx] += 1
        self.m[idx] = ADAM_BETA1 * self.m[idx] + (1 - ADAM_BETA1) * grad
        self.v[idx] = ADAM_BETA2 * self.v[idx] + (1 - ADAM_BETA2) * grad**2
        t = self.t[idx]
        if t.size and t.min() == t.max():
            t = int(t.flat[0])  # whole block shares one count: scalar bias correction
        m_hat = self.m[idx] / (1 - ADAM_BETA1**t)
        v_hat = self.v[idx] / (1 - ADAM_BETA2**t)
        return m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    def _direction_view(self, idx, grad):
        # Same update on basic-slice views, without fancy-index copies.
        m, v, t = self.m[idx], self.v[idx], self.t[idx]
        t += 1
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * grad * grad
        tt = int(t[0]) if t.size and t.min() == t.max() else t
        out = np.sqrt(v / (1 - ADAM_BETA2**tt))
        out += ADAM_EPS
        np.divide(m / (1 - ADAM_BETA1**tt), out, out=out)
        return out


@dataclass
class ScaleBiOState:
    lam: np.ndarray
    w: np.ndarray
    u: np.ndarray
    partition_u: BlockPartition
    partition_w: BlockPartition
    k: int = 0
    moments: Optional[dict] = None
    last_direction_norm: float = 0.0
    last_blocks: tuple = field(default=(None, None))

    @classmethod
    def initial(cls, problem: BilevelProblem, partition_u=None, partition_w=None, init=None, seed=0):
        """Default start: ``lambda0 = 0`` and ``w0 = u0`` equal to one seeded draw."""
        if init is None:
            lam0, w0 = problem.initial_point(seed)
            init = (lam0, w0, w0)
        lam0, w0, u0 = (np.array(v, dtype=float) for v in init)
        if lam0.shape != (problem.dim_lambda,) or w0.shape != (problem.dim_w,) or u0.shape != (problem.dim_w,):
            raise ValueError("initial point does not match problem dimensions")
        partition_u = partition_u or make_partition(problem.dim_w, 1)
        partition_w = partition_w or make_partition(problem.dim_w, 1)
        if partition_u.dim != problem.dim_w or partition_w.dim != problem.dim_w:
            raise ValueError("partitions must cover the inner dimension")
        return cls(lam0, w0, u0, partition_u, partition_w)


def _check_finite(k, **arrays):
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradientError(k, name)


def scalebio_step(problem: BilevelProblem, state: ScaleBiOState, schedule: Schedule, sampler: SamplerConfig):
    """One iteration; returns a new state and leaves ``state`` untouched."""
    k = state.k
    if k >= schedule.total_steps:
        raise ValueError(f"step {k} is past the schedule's {schedule.total_steps} steps")
    rng = counter_rng(sampler.seed, "blocks", k)
    j = int(rng.integers(state.partition_u.J))
    r = int(rng.integers(state.partition_w.J))

    if sampler.full_batch:
        d_trn = d_val = None
    else:
        d_trn = problem.draw_batch(sampler, "train", k)
        d_val = problem.draw_batch(sampler, "val", k)

    lam, w, u = state.lam, state.w, state.u
    alpha = schedule.alpha
    g2_lam_u, g2_w_u = problem.l2_grads(lam, u, d_trn)
    g2_lam_w, g2_w_w = problem.l2_grads(lam, w, d_trn)
    g1_lam, g1_w = problem.l1_grads(lam, w, d_val)

    s1, s2 = sampler.gradient_noise_sigma1, sampler.gradient_noise_sigma2
    if s1 > 0 or s2 > 0:
        nrng = counter_rng(sampler.seed, "noise", k)
        g1_lam = g1_lam + s1 * nrng.standard_normal(g1_lam.shape)
        g1_w = g1_w + s1 * nrng.standard_normal(g1_w.shape)
        g2_lam_u = g2_lam_u + s2 * nrng.standard_normal(g2_lam_u.shape)
        g2_w_u = g2_w_u + s2 * nrng.standard_normal(g2_w_u.shape)
        g2_lam_w = g2_lam_w + s2 * nrng.standard_normal(g2_lam_w.shape)
        g2_w_w = g2_w_w + s2 * nrng.standard_normal(g2_w_w.shape)

    _check_finite(k, grad_l2_at_u=g2_w_u, grad_l2_at_w=g2_w_w, grad_l1=g1_w,
                  grad_lambda=g1_lam + g2_lam_w + g2_lam_u)

    dir_u = alpha * g2_w_u
    dir_w = g1_w + alpha * g2_w_w
    dir_lam = g1_lam + alpha * (g2_lam_w - g2_lam_u)

    bu = state.partition_u.blocks[j]
    bw = state.partition_w.blocks[r]
    u_new, w_new = u.copy(), w.copy()
    moments = state.moments
    if schedule.rule == "plain":
        u_new[bu] -= schedule.eta_u * dir_u[bu]
        w_new[bw] -= schedule.eta_w * dir_w[bw]
        lam_new = lam - schedule.eta_lambda * dir_lam
    else:
        if moments is None:
            moments = {
                "u": AdamMoments.zeros(len(u)),
                "w": AdamMoments.zeros(len(w)),
                "lam": AdamMoments.zeros(len(lam)),
            }
        else:
            moments = {name: mo.copy() for name, mo in moments.items()}
        u_new[bu] -= schedule.eta_u * moments["u"].direction(bu, dir_u[bu])
        w_new[bw] -= schedule.eta_w * moments["w"].direction(bw, dir_w[bw])
        lam_new = lam - schedule.eta_lambda * moments["lam"].direction(slice(None), dir_lam)

    return replace(
        state,
        lam=lam_new,
        w=w_new,
        u=u_new,
        k=k + 1,
        moments=moments,
        last_direction_norm=float(np.linalg.norm(dir_lam)),
        last_blocks=(j, r),
    )


def _log_row(record, problem, state, elapsed):
    p = softmax(state.lam) if record.with_mixture else None
    record.append(
        state.k,
        state.lam,
        problem.l1(state.lam, state.w),
        problem.l2(state.lam, state.w),
        state.last_direction_norm,
        elapsed,
        p=p,
    )


def run(
    problem: BilevelProblem,
    schedule: Schedule,
    sampler: SamplerConfig,
    partition_u=None,
    partition_w=None,
    init=None,
    log_every=1,
    callback: Optional[Callable] = None,
) -> RunRecord:
    """Apply :func:`scalebio_step` ``schedule.total_steps`` times.

    Rows are logged at step 0, every ``log_every`` steps and at the end.
    ``callback(state)`` runs after every step; returning True stops early.
    Time spent logging or in the callback is excluded from ``elapsed_seconds``.
    On a non-finite gradient a diagnostic row is appended and the partial
    record travels with the raised :class:`NonFiniteGradientError`.
    """
    if log_every < 1:
        raise ValueError("log_every must be positive")
    state = ScaleBiOState.initial(problem, partition_u, partition_w, init, seed=sampler.seed)
    record = RunRecord(problem.dim_lambda, with_mixture=problem.reports_mixture)
    record.meta.update(schedule=schedule, sampler=sampler)
    compute = 0.0
    _log_row(record, problem, state, compute)
    if callback is not None:
        callback(state)
    K = schedule.total_steps
    while state.k < K:
        t0 = time.perf_counter()
        try:
            state = scalebio_step(problem, state, schedule, sampler)
        except NonFiniteGradientError as err:
            record.append(state.k + 1, state.lam, math.nan, math.nan, math.nan, compute,
                          p=softmax(state.lam) if record.with_mixture else None)
            err.record = record
            raise
        compute += time.perf_counter() - t0
        stop = bool(callback(state)) if callback is not None else False
        if state.k % log_every == 0 or state.k == K or stop:
            _log_row(record, problem, state, compute)
        if stop:
            break
    record.final = (state.lam.copy(), state.w.copy(), state.u.copy())
    record.meta["final_state"] = state
    return record
