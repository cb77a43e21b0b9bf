"""Closed-form ground truth on quadratic instances and numerical checks of the
penalty reformulation.

On :class:`~scalebio.problems.QuadraticInstance`::

    w*(lam)        = A^{-1} B lam              (= u*(lam))
    w*_alpha(lam)  = (C'C + alpha A)^{-1} (C'y + alpha B lam)
    F(lam)         = L1(lam, w*(lam))
    Gamma_a(lam)   = L1(lam, w*_a) + alpha (L2(lam, w*_a) - L2(lam, u*))
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .problems import BilevelProblem, QuadraticInstance, counter_rng
from .records import fmt17

EPS_CBRT = np.finfo(float).eps ** (1 / 3)


class QuadraticOracle:
    def __init__(self, instance: QuadraticInstance):
        self.instance = instance
        q = instance
        self._a_chol = cho_factor(q.a_matrix)
        self._sens = cho_solve(self._a_chol, q.b_matrix)  # dw*/dlam
        self._m_chol = {}
        g = q.c_matrix @ self._sens
        self._outer_hess = g.T @ g + q.rho * np.eye(q.dim_lambda)
        self._outer_rhs = g.T @ q.y_target

    def _m(self, alpha):
        if alpha not in self._m_chol:
            q = self.instance
            self._m_chol[alpha] = cho_factor(q._ctc + alpha * q.a_matrix)
        return self._m_chol[alpha]

    def wstar(self, lam):
        return self._sens @ lam

    ustar = wstar

    def wstar_alpha(self, lam, alpha):
        q = self.instance
        return cho_solve(self._m(alpha), q._cty + alpha * (q.b_matrix @ lam))

    def minimax_value(self, lam, w, u, alpha):
        q = self.instance
        return q.l1(lam, w) + alpha * (q.l2(lam, w) - q.l2(lam, u))

    def outer_value(self, lam):
        return self.instance.l1(lam, self.wstar(lam))

    def gamma(self, lam, alpha):
        return self.minimax_value(lam, self.wstar_alpha(lam, alpha), self.ustar(lam), alpha)

    def value_gap(self, lam, alpha):
        """``F(lam) - Gamma_a(lam)`` evaluated without cancellation."""
        q = self.instance
        ws, wa = self.wstar(lam), self.wstar_alpha(lam, alpha)
        d = ws - wa
        cd = q.c_matrix @ d
        r_a = q.c_matrix @ wa - q.y_target
        l1_diff = float(r_a @ cd) + 0.5 * float(cd @ cd)
        l2_diff = 0.5 * float(d @ (q.a_matrix @ d))  # grad_w L2(lam, w*) = 0
        return l1_diff - alpha * l2_diff

    def hypergrad(self, lam):
        q = self.instance
        g_lam, g_w = q.l1_grads(lam, self.wstar(lam))
        return g_lam + self._sens.T @ g_w

    def gamma_grad(self, lam, alpha):
        """Gradient of ``Gamma_a`` by the chain rule through both closed forms."""
        q = self.instance
        a, b = q.a_matrix, q.b_matrix
        wa, ws = self.wstar_alpha(lam, alpha), self.wstar(lam)
        jac_wa = alpha * cho_solve(self._m(alpha), b)
        inner = q._ctc @ wa - q._cty + alpha * (a @ wa - b @ lam)
        grad = q.rho * lam + jac_wa.T @ inner - alpha * (b.T @ wa)
        grad -= alpha * (self._sens.T @ (a @ ws - b @ lam) - b.T @ ws)
        return grad

    def gamma_hessian(self, alpha):
        q = self.instance
        jac_wa = alpha * cho_solve(self._m(alpha), q.b_matrix)
        return q.rho * np.eye(q.dim_lambda) - alpha * q.b_matrix.T @ (jac_wa - self._sens)

    def outer_hessian(self):
        return self._outer_hess.copy()

    def lam_star(self):
        return np.linalg.lstsq(self._outer_hess, self._outer_rhs, rcond=None)[0]


def ift_hypergrad(oracle: QuadraticOracle, lam):
    """``grad_lam L1 + (A^{-1}B)' grad_w L1`` at ``w*(lam)``."""
    return oracle.hypergrad(np.asarray(lam, dtype=float))


def finite_diff_grad(f, x, h=None):
    """Central differences, ``h_i = max(1, |x_i|) * eps^(1/3)`` by default.

    ``h`` may be a scalar or a callable ``h(x_i)``.
    """
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(len(x)):
        if h is None:
            hi = max(1.0, abs(x[i])) * EPS_CBRT
        elif callable(h):
            hi = h(x[i])
        else:
            hi = float(h)
        xp, xm = x.copy(), x.copy()
        xp[i] += hi
        xm[i] -= hi
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        grad[i] = (fp - fm) / (xp[i] - xm[i])
    return grad


def relative_error(a, b, floor=1e-300):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def loglog_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def _alpha_threshold(constants):
    return 2 * constants.ell11 / constants.mu2


@dataclass
class GapScan:
    rows: list
    value_slope: float
    grad_slope: float


def lemma1_gap_scan(oracle: QuadraticOracle, lam, alphas) -> GapScan:
    """Exact ``|F - Gamma_a|`` and ``|grad F - grad Gamma_a|`` over ``alphas``
    with fitted log-log slopes."""
    consts = oracle.instance.constants
    thr = _alpha_threshold(consts)
    bad = [a for a in alphas if not a > thr]
    if bad:
        raise ValueError(f"alpha must exceed 2*ell11/mu2 = {thr:.6g}; got {bad}")
    lam = np.asarray(lam, dtype=float)
    hg = oracle.hypergrad(lam)
    rows = []
    for a in alphas:
        rows.append(dict(
            alpha=float(a),
            value_gap=abs(oracle.value_gap(lam, a)),
            grad_gap=float(np.linalg.norm(hg - oracle.gamma_grad(lam, a))),
        ))
    al = [r["alpha"] for r in rows]
    return GapScan(
        rows,
        loglog_slope(al, [r["value_gap"] for r in rows]),
        loglog_slope(al, [r["grad_gap"] for r in rows]),
    )


def wstar_alpha_distance_check(oracle: QuadraticOracle, lam, alphas, slack=1.05):
    """Rows ``(alpha, wdist, wbound, within)`` comparing ``|w*_a - w*|`` against
    ``C0 / alpha`` with ``C0 = ell10 / mu2`` taken on the instance's region."""
    inst = oracle.instance
    lam = np.asarray(lam, dtype=float)
    if not inst.in_region(lam):
        raise ValueError(f"|lambda| = {np.linalg.norm(lam):.4g} exceeds region radius {inst.region_radius}")
    c0 = inst.constants.c0
    ws = oracle.wstar(lam)
    rows = []
    for a in alphas:
        dist = float(np.linalg.norm(oracle.wstar_alpha(lam, a) - ws))
        bound = c0 / a
        rows.append(dict(alpha=float(a), wdist=dist, wbound=bound, within=dist <= slack * bound))
    return rows


def scan_table(oracle: QuadraticOracle, lam, alphas):
    """Rows with the CSV columns ``alpha, value_gap, grad_gap, wdist, wbound``."""
    gaps = lemma1_gap_scan(oracle, lam, alphas).rows
    dists = wstar_alpha_distance_check(oracle, lam, alphas)
    return [dict(g, wdist=d["wdist"], wbound=d["wbound"]) for g, d in zip(gaps, dists)]


def write_scan_csv(rows, path) -> Path:
    path = Path(path)
    cols = ["alpha", "value_gap", "grad_gap", "wdist", "wbound"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([fmt17(r[c]) for c in cols])
    return path


@dataclass
class CurvatureReport:
    alpha: float
    trials: int
    concavity_modulus: float
    convexity_modulus: float
    concavity_violations: int = 0
    convexity_violations: int = 0
    convexity_checked: bool = True
    status: str = "ok"
    worst_margin: dict = field(default_factory=dict)

    @property
    def violations(self):
        return self.concavity_violations + self.convexity_violations


def curvature_probe(problem: BilevelProblem, lam, alpha, trials=100, seed=0, scale=1.0, center=None, slack=1e-9):
    """Segment probes of strong concavity in ``u`` (modulus ``mu2*alpha``) and
    strong convexity in ``w`` (modulus ``mu2*alpha/2``) of the penalty objective.

    The convexity half runs only when ``alpha > 2*ell11/mu2``.
    """
    consts = problem.constants
    mu2 = consts.mu2
    lam = np.asarray(lam, dtype=float)
    center = np.zeros(problem.dim_w) if center is None else np.asarray(center, dtype=float)
    mu_cave, mu_vex = mu2 * alpha, mu2 * alpha / 2
    report = CurvatureReport(alpha, trials, mu_cave, mu_vex)
    report.convexity_checked = alpha > _alpha_threshold(consts)
    if not report.convexity_checked:
        report.status = (f"convexity half skipped: alpha={alpha:.4g} "
                         f"<= 2*ell11/mu2={_alpha_threshold(consts):.4g}")

    def obj(w, u):
        return problem.l1(lam, w) + alpha * (problem.l2(lam, w) - problem.l2(lam, u))

    rng = counter_rng(seed, "curvature", 0)
    worst_cave = worst_vex = np.inf
    for _ in range(trials):
        t = rng.uniform(0.05, 0.95)
        w_fix = center + scale * rng.standard_normal(problem.dim_w)
        u1 = center + scale * rng.standard_normal(problem.dim_w)
        u2 = center + scale * rng.standard_normal(problem.dim_w)
        gap = 0.5 * t * (1 - t) * float((u1 - u2) @ (u1 - u2))
        lhs = obj(w_fix, t * u1 + (1 - t) * u2)
        margin = lhs - (t * obj(w_fix, u1) + (1 - t) * obj(w_fix, u2) + mu_cave * gap) + slack
        worst_cave = min(worst_cave, margin)
        report.concavity_violations += margin < 0

        if report.convexity_checked:
            u_fix = center + scale * rng.standard_normal(problem.dim_w)
            w1 = center + scale * rng.standard_normal(problem.dim_w)
            w2 = center + scale * rng.standard_normal(problem.dim_w)
            gap = 0.5 * t * (1 - t) * float((w1 - w2) @ (w1 - w2))
            rhs = t * obj(w1, u_fix) + (1 - t) * obj(w2, u_fix) - mu_vex * gap
            margin = rhs - obj(t * w1 + (1 - t) * w2, u_fix) + slack
            worst_vex = min(worst_vex, margin)
            report.convexity_violations += margin < 0
    report.worst_margin = {"concavity": worst_cave, "convexity": worst_vex}
    if report.violations:
        report.status = f"{report.violations} violations"
    return report


def gamma_hessian_alpha_scan(oracle: QuadraticOracle, alphas=(1e2, 1e3, 1e4)):
    """Spectral norms of the Hessian of ``Gamma_a`` and their relative spread."""
    norms = [float(np.linalg.norm(oracle.gamma_hessian(a), 2)) for a in alphas]
    spread = (max(norms) - min(norms)) / max(norms)
    return norms, spread


def solve_inner(problem: BilevelProblem, lam, w_init=None, gtol=1e-10, max_iter=5000):
    """Full-batch inner minimizer ``argmin_w L2(lam, w)`` by L-BFGS."""
    from scipy.optimize import minimize

    lam = np.asarray(lam, dtype=float)
    w0 = np.zeros(problem.dim_w) if w_init is None else np.asarray(w_init, dtype=float)
    res = minimize(lambda w: (problem.l2(lam, w), problem.grad_l2_w(lam, w)), w0, jac=True,
                   method="L-BFGS-B", options=dict(maxiter=max_iter, gtol=gtol, ftol=0.0))
    return res.x


def inner_hessian(problem: BilevelProblem, lam, w, fd_step=1e-6, analytic=True):
    """Dense ``d^2 L2 / dw^2``: the problem's own ``l2_hessian_ww`` when it has
    one (and ``analytic``), else central differences of ``grad_w L2`` column by
    column, symmetrized."""
    if analytic and hasattr(problem, "l2_hessian_ww"):
        try:
            return problem.l2_hessian_ww(lam, w)
        except NotImplementedError:
            pass
    n = problem.dim_w
    h_ww = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = fd_step
        h_ww[:, i] = (problem.grad_l2_w(lam, w + e) - problem.grad_l2_w(lam, w - e)) / (2 * fd_step)
    return 0.5 * (h_ww + h_ww.T)


def reference_hypergrad(problem: BilevelProblem, lam, w_init=None, fd_step=1e-6):
    """Implicit-function hypergradient for problems without a closed form.

    Returns ``(hypergradient, w*)``.  The inner problem is solved to tight
    tolerance, the inner Hessian (see :func:`inner_hessian`) is solved
    densely, and the mixed term comes
    from one directional difference of ``grad_lambda L2``.  Meant as ground
    truth for small ``dim_w``.
    """
    lam = np.asarray(lam, dtype=float)
    w = solve_inner(problem, lam, w_init)
    h_ww = inner_hessian(problem, lam, w, fd_step)
    g1_lam, g1_w = problem.l1_grads(lam, w)
    x = np.linalg.solve(h_ww, g1_w)
    h = fd_step / max(1.0, float(np.linalg.norm(x)))
    mixed = (problem.grad_l2_lambda(lam, w + h * x) - problem.grad_l2_lambda(lam, w - h * x)) / (2 * h)
    return g1_lam - mixed, w
