"""Second-order hypergradient baselines and an outer gradient-descent driver.

All estimators target the implicit-differentiation hypergradient

    grad F = grad_lam L1 - H_lw [H_ww]^{-1} grad_w L1

where ``H_ww`` is the inner Hessian and ``H_lw = d(grad_lam L2)/dw``.  They only
touch second-order information through Hessian-vector products.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .problems import BilevelProblem, QuadraticInstance, SamplerConfig
from .records import RunRecord
from .reweight import softmax


class NeumannDivergenceError(RuntimeError):
    pass


class CGNotConvergedError(RuntimeError):
    def __init__(self, iterations, residual):
        super().__init__(f"CG did not converge in {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class HvpOracle:
    """Hessian-vector products of L2.

    ``analytic`` works on quadratic instances only; ``finite_difference`` uses
    ``(grad L2(w + h v) - grad L2(w - h v)) / 2h`` with ``h = fd_step / max(1, |v|)``.
    """

    mode: str = "finite_difference"
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.mode not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown HVP mode {self.mode!r}")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")

    def _fd(self, problem, lam, w, v, batch):
        h = self.fd_step / max(1.0, float(np.linalg.norm(v)))
        gl_p, gw_p = problem.l2_grads(lam, w + h * v, batch)
        gl_m, gw_m = problem.l2_grads(lam, w - h * v, batch)
        return (gl_p - gl_m) / (2 * h), (gw_p - gw_m) / (2 * h)

    def _require_quadratic(self, problem):
        if not isinstance(problem, QuadraticInstance):
            raise TypeError("analytic HVPs need a QuadraticInstance")

    def hvp_ww(self, problem, lam, w, v, batch=None):
        """``d^2 L2/dw^2 @ v``."""
        if self.mode == "analytic":
            self._require_quadratic(problem)
            return problem.a_matrix @ v
        return self._fd(problem, lam, w, v, batch)[1]

    def hvp_lw(self, problem, lam, w, v, batch=None):
        """``d(grad_lam L2)/dw @ v``, a vector in lambda space."""
        if self.mode == "analytic":
            self._require_quadratic(problem)
            return -(problem.b_matrix.T @ v)
        return self._fd(problem, lam, w, v, batch)[0]

    def both(self, problem, lam, w, v, batch=None):
        """``(hvp_lw, hvp_ww)`` sharing one pair of gradient evaluations."""
        if self.mode == "analytic":
            return self.hvp_lw(problem, lam, w, v), self.hvp_ww(problem, lam, w, v)
        return self._fd(problem, lam, w, v, batch)


@dataclass(frozen=True)
class BaselineConfig:
    """``None`` step sizes resolve from the problem constants:
    ``inner_step_size = 1/ell21`` and ``neumann_scale = 0.5/ell21``."""

    inner_steps: int = 100
    inner_step_size: Optional[float] = None
    neumann_terms: int = 64
    neumann_scale: Optional[float] = None
    cg_iterations: int = 100
    cg_tol: float = 1e-8
    unroll_depth: Optional[int] = None
    minibatch: bool = False

    def step_size(self, problem):
        if self.inner_step_size is not None:
            return self.inner_step_size
        return 1.0 / problem.constants.ell21

    def eta_n(self, problem):
        if self.neumann_scale is not None:
            return self.neumann_scale
        return 0.5 / problem.constants.ell21


def _finite(k, arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {what} at iteration {k}")


def inner_solve(problem: BilevelProblem, lam, w_init, T, step, tape=False, batches=None):
    """``T`` gradient steps on ``L2(lam, .)``.

    Returns ``w_T``, or ``(w_T, [w_0, ..., w_T])`` when ``tape`` is set.
    ``batches`` optionally supplies one training batch per step.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    w = np.array(w_init, dtype=float)
    iterates = [w.copy()] if tape else None
    for t in range(T):
        g = problem.grad_l2_w(lam, w, None if batches is None else batches[t])
        _finite(t, g, "inner gradient")
        w = w - step * g
        if tape:
            iterates.append(w.copy())
    return (w, iterates) if tape else w


def conjugate_gradient(apply_a: Callable, b, x0=None, tol=1e-10, max_iter=100):
    """Solve ``A x = b`` for SPD ``A`` given as a matvec.

    Returns ``(x, iterations, residual_norm)``; raises
    :class:`CGNotConvergedError` when ``|r| > tol`` after ``max_iter`` steps.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - apply_a(x) if x0 is not None else b.copy()
    d = r.copy()
    rr = float(r @ r)
    if np.sqrt(rr) <= tol:
        return x, 0, float(np.sqrt(rr))
    for it in range(1, max_iter + 1):
        ad = apply_a(d)
        step = rr / float(d @ ad)
        x += step * d
        r -= step * ad
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= tol:
            return x, it, float(np.sqrt(rr_new))
        d = r + (rr_new / rr) * d
        rr = rr_new
    raise CGNotConvergedError(max_iter, float(np.sqrt(rr)))


def neumann_correction(problem, lam, w, v, terms, eta, oracle: HvpOracle, batch=None):
    """``H_lw @ [eta sum_{q<terms} (I - eta H_ww)^q] @ v`` plus the partial
    sums of the bracket (for diagnostics)."""
    term = np.array(v, dtype=float)
    first = float(np.linalg.norm(term))
    acc = eta * term
    partial = [acc.copy()]
    for q in range(1, terms):
        term = term - eta * oracle.hvp_ww(problem, lam, w, term, batch)
        if first > 0 and np.linalg.norm(term) > 10.0 * first:
            raise NeumannDivergenceError(
                f"Neumann terms grew tenfold by q={q}; eta_N={eta:.3g} is too large"
            )
        acc = acc + eta * term
        partial.append(acc.copy())
    return oracle.hvp_lw(problem, lam, w, acc, batch), partial


def _stocbio_at(problem, lam, w, config, oracle, batch_val=None, batch_trn=None):
    g1_lam, g1_w = problem.l1_grads(lam, w, batch_val)
    corr, _ = neumann_correction(problem, lam, w, -g1_w, config.neumann_terms,
                                 config.eta_n(problem), oracle, batch_trn)
    return g1_lam + corr


def _cg_at(problem, lam, w, config, oracle):
    g1_lam, g1_w = problem.l1_grads(lam, w)
    x, _, _ = conjugate_gradient(lambda v: oracle.hvp_ww(problem, lam, w, v), g1_w,
                                 tol=config.cg_tol, max_iter=config.cg_iterations)
    return g1_lam - oracle.hvp_lw(problem, lam, w, x)


def _reverse_from_tape(problem, lam, iterates, step, depth, oracle):
    w_T = iterates[-1]
    g1_lam, v = problem.l1_grads(lam, w_T)
    grad = g1_lam.copy()
    T = len(iterates) - 1
    for t in range(T - 1, T - 1 - depth, -1):
        hl, hw = oracle.both(problem, lam, iterates[t], v)
        grad -= step * hl
        v = v - step * hw
    return grad


def _stocbio_batches(problem, sampler, outer_step, T):
    base = outer_step * (T + 1)
    trn = [problem.draw_batch(sampler, "train", base + t) for t in range(T + 1)]
    val = problem.draw_batch(sampler, "val", base + T)
    return trn, val


def stocbio_hypergrad(problem, lam, config: BaselineConfig, oracle: HvpOracle,
                      w_init=None, sampler: Optional[SamplerConfig] = None, outer_step=0):
    """Neumann-series estimator evaluated at the inner iterate ``w_T``.

    With ``config.minibatch`` and a ``sampler``, inner steps, the outer gradient
    and the Hessian products use seeded minibatches.
    """
    if config.neumann_terms < 1:
        raise ValueError("need at least one Neumann term")
    lam = np.asarray(lam, dtype=float)
    w0 = np.zeros(problem.dim_w) if w_init is None else w_init
    if config.minibatch and sampler is not None:
        trn, val = _stocbio_batches(problem, sampler, outer_step, config.inner_steps)
        w_T = inner_solve(problem, lam, w0, config.inner_steps, config.step_size(problem), batches=trn[:-1])
        return _stocbio_at(problem, lam, w_T, config, oracle, val, trn[-1])
    w_T = inner_solve(problem, lam, w0, config.inner_steps, config.step_size(problem))
    return _stocbio_at(problem, lam, w_T, config, oracle)


def cg_hypergrad(problem, lam, config: BaselineConfig, oracle: HvpOracle, w_init=None):
    """Solve ``H_ww x = grad_w L1`` by CG at ``w_T``; return ``grad_lam L1 - H_lw x``."""
    if config.cg_iterations < 1:
        raise ValueError("cg_iterations must be at least 1")
    lam = np.asarray(lam, dtype=float)
    w0 = np.zeros(problem.dim_w) if w_init is None else w_init
    w_T = inner_solve(problem, lam, w0, config.inner_steps, config.step_size(problem))
    return _cg_at(problem, lam, w_T, config, oracle)


def reverse_hypergrad(problem, lam, config: BaselineConfig, oracle: Optional[HvpOracle] = None, w_init=None):
    """Reverse-mode derivative of ``L1(lam, w_T)`` through the last
    ``unroll_depth`` inner gradient steps (all of them by default)."""
    oracle = oracle or HvpOracle()
    depth = config.inner_steps if config.unroll_depth is None else config.unroll_depth
    if depth < 1:
        raise ValueError("unroll_depth must be at least 1")
    if depth > config.inner_steps:
        raise ValueError(f"unroll_depth {depth} exceeds the {config.inner_steps}-step tape")
    lam = np.asarray(lam, dtype=float)
    w0 = np.zeros(problem.dim_w) if w_init is None else w_init
    step = config.step_size(problem)
    _, iterates = inner_solve(problem, lam, w0, config.inner_steps, step, tape=True)
    return _reverse_from_tape(problem, lam, iterates, step, depth, oracle)


METHODS = ("exact", "stocbio", "cg", "reverse")


def outer_descent(
    problem: BilevelProblem,
    method,
    outer_steps,
    outer_step_size,
    config: Optional[BaselineConfig] = None,
    oracle: Optional[HvpOracle] = None,
    lam0=None,
    w0=None,
    sampler: Optional[SamplerConfig] = None,
    exact_oracle=None,
    log_every=1,
    callback: Optional[Callable] = None,
) -> RunRecord:
    """Gradient descent on lambda with the chosen hypergradient estimator.

    Inner solves warm-start from the previous outer step.  ``method="exact"``
    needs ``exact_oracle`` (a :class:`~scalebio.oracle.QuadraticOracle`).
    ``callback(k, lam, w)`` runs after each outer step outside the timed
    region; returning True stops early.
    """
    if method not in METHODS:
        raise ValueError(f"unknown hypergradient method {method!r}")
    if outer_steps < 0:
        raise ValueError("outer_steps must be nonnegative")
    if method == "exact" and exact_oracle is None:
        raise ValueError("exact hypergradients need a closed-form oracle")
    config = config or BaselineConfig()
    oracle = oracle or HvpOracle()
    if lam0 is None or w0 is None:
        lam_d, w_d = problem.initial_point(0 if sampler is None else sampler.seed)
        lam0 = lam_d if lam0 is None else lam0
        w0 = w_d if w0 is None else w0
    lam = np.array(lam0, dtype=float)
    w = np.array(w0, dtype=float)
    step = config.step_size(problem) if method != "exact" else None

    record = RunRecord(problem.dim_lambda, with_mixture=problem.reports_mixture)
    record.meta.update(method=method, config=config)
    compute = 0.0

    def log(k, direction_norm):
        p = softmax(lam) if record.with_mixture else None
        record.append(k, lam, problem.l1(lam, w), problem.l2(lam, w), direction_norm, compute, p=p)

    log(0, 0.0)
    if callback is not None and callback(0, lam, w):
        outer_steps = 0
    for k in range(outer_steps):
        t0 = time.perf_counter()
        if method == "exact":
            w = exact_oracle.wstar(lam)
            grad = exact_oracle.hypergrad(lam)
        elif method == "stocbio" and config.minibatch and sampler is not None:
            trn, val = _stocbio_batches(problem, sampler, k, config.inner_steps)
            w = inner_solve(problem, lam, w, config.inner_steps, step, batches=trn[:-1])
            grad = _stocbio_at(problem, lam, w, config, oracle, val, trn[-1])
        elif method == "reverse":
            depth = config.inner_steps if config.unroll_depth is None else config.unroll_depth
            w_T, iterates = inner_solve(problem, lam, w, config.inner_steps, step, tape=True)
            grad = _reverse_from_tape(problem, lam, iterates, step, depth, oracle)
            w = w_T
        else:
            w = inner_solve(problem, lam, w, config.inner_steps, step)
            grad = (_stocbio_at if method == "stocbio" else _cg_at)(problem, lam, w, config, oracle)
        _finite(k, grad, "hypergradient")
        lam = lam - outer_step_size * grad
        compute += time.perf_counter() - t0
        stop = bool(callback(k + 1, lam, w)) if callback is not None else False
        if (k + 1) % log_every == 0 or k + 1 == outer_steps or stop:
            log(k + 1, float(np.linalg.norm(grad)))
        if stop:
            break
    record.final = (lam.copy(), w.copy(), w.copy())
    return record
