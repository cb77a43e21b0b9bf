"""Bilevel problem capability, the quadratic verification family, synthetic
sources with planted structure, and seeded minibatch sampling.

A bilevel problem pairs an outer loss ``L1(lambda, w)`` with an inner loss
``L2(lambda, w)`` that is strongly convex in ``w``.  Every evaluator accepts an
optional :class:`BatchHandle`; ``None`` means the full batch.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ORIGINS = ("train", "val")


@dataclass(frozen=True)
class ProblemConstants:
    """Smoothness and curvature constants of a bilevel problem.

    ``ell22`` is ``None`` when the Hessian-Lipschitz constant is not estimated
    (every non-quadratic problem).
    """

    mu2: float
    ell10: float
    ell11: float
    ell21: float
    ell22: Optional[float] = None

    def __post_init__(self):
        if not self.mu2 > 0:
            raise ValueError(f"mu2 must be positive, got {self.mu2}")
        for name in ("ell10", "ell11", "ell21"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def kappa(self) -> float:
        ells = [self.ell10, self.ell11, self.ell21]
        if self.ell22 is not None:
            ells.append(self.ell22)
        return max(ells) / self.mu2

    @property
    def c0(self) -> float:
        return self.ell10 / self.mu2


@dataclass(frozen=True)
class BatchHandle:
    """Minibatch of example references ``(source index, example index)``."""

    example_refs: np.ndarray
    origin: str

    def __post_init__(self):
        refs = np.asarray(self.example_refs, dtype=np.int64).reshape(-1, 2)
        if len(refs) == 0:
            raise ValueError("batch must contain at least one example")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown batch origin {self.origin!r}")
        object.__setattr__(self, "example_refs", refs)

    @property
    def sources(self) -> np.ndarray:
        return self.example_refs[:, 0]

    @property
    def indices(self) -> np.ndarray:
        return self.example_refs[:, 1]

    def __len__(self):
        return len(self.example_refs)

    def __eq__(self, other):
        if not isinstance(other, BatchHandle):
            return NotImplemented
        return self.origin == other.origin and np.array_equal(
            self.example_refs, other.example_refs
        )

    __hash__ = None


@dataclass(frozen=True)
class SamplerConfig:
    batch_size_train: int = 64
    batch_size_val: int = 64
    seed: int = 0
    gradient_noise_sigma1: float = 0.0
    gradient_noise_sigma2: float = 0.0
    full_batch: bool = False

    def __post_init__(self):
        if self.batch_size_train < 1 or self.batch_size_val < 1:
            raise ValueError("batch sizes must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.gradient_noise_sigma1 < 0 or self.gradient_noise_sigma2 < 0:
            raise ValueError("gradient noise levels must be nonnegative")

    def batch_size(self, origin: str) -> int:
        return self.batch_size_train if origin == "train" else self.batch_size_val


def counter_rng(seed: int, tag: str, step: int) -> np.random.Generator:
    """Stateless generator keyed by ``(seed, tag, step)``.

    Philox is counter based, so the stream for any step can be rebuilt without
    replaying earlier steps.
    """
    key = np.array([int(seed) % 2**64, zlib.crc32(tag.encode())], dtype=np.uint64)
    counter = np.array([0, int(step), 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


class BilevelProblem:
    """Capability bundle for ``min_lambda L1(lambda, w*(lambda))``.

    Subclasses implement :meth:`l1`, :meth:`l2`, :meth:`l1_grads` and
    :meth:`l2_grads`; the latter two return ``(grad_lambda, grad_w)``.
    Data-backed problems also override :meth:`draw_batch`.
    """

    dim_lambda: int
    dim_w: int
    constants: Optional[ProblemConstants] = None
    reports_mixture = False

    def l1(self, lam, w, batch=None) -> float:
        raise NotImplementedError

    def l2(self, lam, w, batch=None) -> float:
        raise NotImplementedError

    def l1_grads(self, lam, w, batch=None):
        raise NotImplementedError

    def l2_grads(self, lam, w, batch=None):
        raise NotImplementedError

    def grad_l1_lambda(self, lam, w, batch=None) -> np.ndarray:
        return self.l1_grads(lam, w, batch)[0]

    def grad_l1_w(self, lam, w, batch=None) -> np.ndarray:
        return self.l1_grads(lam, w, batch)[1]

    def grad_l2_lambda(self, lam, w, batch=None) -> np.ndarray:
        return self.l2_grads(lam, w, batch)[0]

    def grad_l2_w(self, lam, w, batch=None) -> np.ndarray:
        return self.l2_grads(lam, w, batch)[1]

    def draw_batch(self, config: SamplerConfig, origin: str, step: int):
        """Batch for ``origin`` at ``step``; ``None`` for data-free problems."""
        return None

    def initial_point(self, seed: int = 0, scale: float = 0.1):
        """Default ``(lambda0, w0)``: uniform mixture and a seeded normal draw."""
        rng = counter_rng(seed, "init", 0)
        return np.zeros(self.dim_lambda), scale * rng.standard_normal(self.dim_w)


class QuadraticInstance(BilevelProblem):
    """``L2 = 1/2 w'Aw - lambda'B'w`` and ``L1 = 1/2 |Cw - y|^2 + rho/2 |lambda|^2``.

    Constants come from matrix spectra.  ``ell10`` holds on the region
    ``{|lambda| <= R, |w - w*(lambda)| <= R}`` with ``R = region_radius``.
    """

    def __init__(self, a_matrix, b_matrix, c_matrix, y_target, rho=0.0, region_radius=10.0):
        a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
        b = np.asarray(b_matrix, dtype=float).reshape(a.shape[0], -1)
        c = np.asarray(c_matrix, dtype=float).reshape(-1, a.shape[0])
        y = np.asarray(y_target, dtype=float).reshape(-1)
        if a.shape[0] != a.shape[1]:
            raise ValueError("A must be square")
        if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
            raise ValueError("A must be symmetric")
        if len(y) != c.shape[0]:
            raise ValueError("y must have one entry per row of C")
        if rho < 0 or region_radius <= 0:
            raise ValueError("rho must be nonnegative and region_radius positive")
        eig = np.linalg.eigvalsh(a)
        if eig[0] <= 0:
            raise ValueError(f"A must be positive definite (smallest eigenvalue {eig[0]:.3g})")

        self.a_matrix, self.b_matrix, self.c_matrix, self.y_target = a, b, c, y
        self.rho = float(rho)
        self.region_radius = float(region_radius)
        self.dim_w, self.dim_lambda = b.shape
        self._ctc = c.T @ c
        self._cty = c.T @ y

        ctc_norm = np.linalg.eigvalsh(self._ctc)[-1] if c.size else 0.0
        sens = np.linalg.norm(np.linalg.solve(a, b), 2)
        radius = self.region_radius
        self.constants = ProblemConstants(
            mu2=float(eig[0]),
            ell10=float(ctc_norm * (sens * radius + radius) + np.linalg.norm(self._cty)),
            ell11=float(max(self.rho, ctc_norm)),
            ell21=float(eig[-1]),
            ell22=0.0,
        )

    def l1(self, lam, w, batch=None):
        r = self.c_matrix @ w - self.y_target
        return 0.5 * float(r @ r) + 0.5 * self.rho * float(lam @ lam)

    def l2(self, lam, w, batch=None):
        return 0.5 * float(w @ (self.a_matrix @ w)) - float(lam @ (self.b_matrix.T @ w))

    def l1_grads(self, lam, w, batch=None):
        return self.rho * lam, self._ctc @ w - self._cty

    def l2_grads(self, lam, w, batch=None):
        return -(self.b_matrix.T @ w), self.a_matrix @ w - self.b_matrix @ lam

    def wstar(self, lam):
        return np.linalg.solve(self.a_matrix, self.b_matrix @ lam)

    def in_region(self, lam) -> bool:
        return float(np.linalg.norm(lam)) <= self.region_radius


def make_quadratic(
    dim_lambda,
    dim_w,
    mu2_target,
    seed,
    *,
    rows=None,
    condition=4.0,
    outer_curvature=1.0,
    rho=0.0,
    realizable=False,
    region_radius=10.0,
):
    """Random quadratic bilevel instance with ``lambda_min(A) == mu2_target``.

    ``A`` is built from a random orthogonal basis and eigenvalues drawn in
    ``[mu2, condition * mu2]``.  ``C`` is scaled so ``|C|_2^2 = outer_curvature
    * mu2``.  With ``realizable=True`` the target is ``y = C A^{-1} B lambda_t``
    for a hidden ``lambda_t``, so the bilevel optimum has zero outer residual.
    """
    if dim_lambda < 1 or dim_w < 1:
        raise ValueError("dimensions must be positive")
    if not mu2_target > 0:
        raise ValueError(f"mu2_target must be positive, got {mu2_target}")
    if condition < 1:
        raise ValueError("condition must be >= 1")
    rows = dim_w if rows is None else rows
    rng = np.random.default_rng(seed)

    q, _ = np.linalg.qr(rng.standard_normal((dim_w, dim_w)))
    eigs = np.sort(rng.uniform(mu2_target, condition * mu2_target, dim_w))
    eigs[0] = mu2_target
    a = (q * eigs) @ q.T
    a = 0.5 * (a + a.T)

    b = rng.standard_normal((dim_w, dim_lambda))
    c = rng.standard_normal((rows, dim_w))
    c *= np.sqrt(outer_curvature * mu2_target) / np.linalg.norm(c, 2)
    if realizable:
        lam_t = rng.standard_normal(dim_lambda)
        y = c @ np.linalg.solve(a, b @ lam_t)
    else:
        y = rng.standard_normal(rows)
    return QuadraticInstance(a, b, c, y, rho=rho, region_radius=region_radius)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


@dataclass
class DataSource:
    source_id: int
    features: np.ndarray
    labels: np.ndarray
    corrupted_mask: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels)
        self.corrupted_mask = np.asarray(self.corrupted_mask, dtype=bool)
        n = len(self.features)
        if n < 1:
            raise ValueError("a data source needs at least one example")
        if len(self.labels) != n or len(self.corrupted_mask) != n:
            raise ValueError("features, labels and corrupted_mask lengths differ")

    @property
    def n(self) -> int:
        return len(self.features)


@dataclass
class SyntheticDataset:
    """Examples grouped by source.

    ``task`` is ``"classification"`` (integer labels in ``[0, num_classes)``)
    or ``"regression"``.
    """

    sources: list
    feature_dim: int
    task: str = "classification"
    num_classes: int = 2

    def __post_init__(self):
        if not self.sources:
            raise ValueError("dataset has no sources")
        for src in self.sources:
            if src.features.shape[1] != self.feature_dim:
                raise ValueError("feature dimension mismatch")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        self._offsets = np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def m(self) -> int:
        return len(self.sources)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([s.n for s in self.sources])

    @property
    def n_total(self) -> int:
        return int(self.sizes.sum())

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([s.features for s in self.sources])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([s.labels for s in self.sources])

    @property
    def corrupted_mask(self) -> np.ndarray:
        return np.concatenate([s.corrupted_mask for s in self.sources])

    @property
    def source_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.m), self.sizes)

    def flat_index(self, refs: np.ndarray) -> np.ndarray:
        """Map ``(source, example)`` references to positions in the flat arrays."""
        refs = np.asarray(refs).reshape(-1, 2)
        return self._offsets[refs[:, 0]] + refs[:, 1]


@dataclass
class SourceSpec:
    """Generating recipe for one source.

    ``planted`` is a ``(feature_dim, num_classes)`` matrix for classification
    (labels drawn from the softmax of ``x @ planted``) or a ``feature_dim``
    vector for regression (``y = x @ planted + noise_std * eps``).
    """

    n: int
    planted: np.ndarray
    task: str = "classification"
    corruption: float = 0.0
    noise_std: float = 0.1
    input_mean: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError(f"corruption fraction {self.corruption} outside [0, 1]")
        self.planted = np.asarray(self.planted, dtype=float)


def planted_parameter(feature_dim, seed, *, num_classes=None, scale=1.0):
    """Seeded planted parameter; a matrix when ``num_classes`` is given."""
    rng = np.random.default_rng(seed)
    shape = (feature_dim,) if num_classes is None else (feature_dim, num_classes)
    return scale * rng.standard_normal(shape)


def _generate_source(idx, spec: SourceSpec, feature_dim, seed):
    rng = np.random.default_rng([seed, idx])
    x = rng.standard_normal((spec.n, feature_dim))
    if spec.input_mean is not None:
        x += spec.input_mean
    corrupted = np.zeros(spec.n, dtype=bool)
    n_bad = int(np.floor(spec.corruption * spec.n))
    bad = rng.permutation(spec.n)[:n_bad]
    corrupted[bad] = True

    if spec.task == "classification":
        num_classes = spec.planted.shape[1]
        logits = x @ spec.planted
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(axis=1, keepdims=True)
        u = rng.random(spec.n)
        y = (prob.cumsum(axis=1) < u[:, None]).sum(axis=1)
        y = np.minimum(y, num_classes - 1)
        y[bad] = rng.integers(0, num_classes, n_bad)
    else:
        y = x @ spec.planted + spec.noise_std * rng.standard_normal(spec.n)
        scale = 10.0 * (y.std() if spec.n > 1 else 1.0)
        y[bad] = scale * rng.standard_t(2, n_bad)
    return DataSource(idx, x, y, corrupted)


def gen_sources(specs: Sequence[SourceSpec], seed, feature_dim=None) -> SyntheticDataset:
    """Generate one :class:`DataSource` per spec.

    A corruption fraction ``f`` corrupts exactly ``floor(f * n)`` examples
    chosen by a seeded permutation: classification labels become uniform over
    the classes, regression labels become Student-t(2) draws scaled by ten
    times the clean label standard deviation.
    """
    if not specs:
        raise ValueError("need at least one source spec")
    tasks = {s.task for s in specs}
    if len(tasks) != 1:
        raise ValueError("all sources must share one task")
    task = tasks.pop()
    dims = {s.planted.shape[0] for s in specs}
    if len(dims) != 1 or (feature_dim is not None and dims != {feature_dim}):
        raise ValueError("planted parameters disagree on feature dimension")
    feature_dim = dims.pop()
    num_classes = specs[0].planted.shape[1] if task == "classification" else 1
    sources = [_generate_source(i, s, feature_dim, seed) for i, s in enumerate(specs)]
    return SyntheticDataset(sources, feature_dim, task=task, num_classes=num_classes)


def sample_batch(dataset: SyntheticDataset, config: SamplerConfig, origin, step_index) -> BatchHandle:
    """i.i.d. draw with replacement, a pure function of ``(seed, origin, step)``.

    Training batches pick a source uniformly and then an example uniformly
    within it; validation batches pick examples uniformly from the pooled set.
    """
    if origin not in ORIGINS:
        raise ValueError(f"unknown origin {origin!r}")
    if dataset is None or dataset.n_total == 0:
        raise ValueError("cannot sample from an empty dataset")
    rng = counter_rng(config.seed, origin, step_index)
    size = config.batch_size(origin)
    sizes = dataset.sizes
    if origin == "train":
        src = rng.integers(0, dataset.m, size)
        idx = np.floor(rng.random(size) * sizes[src]).astype(np.int64)
    else:
        flat = rng.integers(0, dataset.n_total, size)
        src = np.searchsorted(dataset._offsets, flat, side="right") - 1
        idx = flat - dataset._offsets[src]
    return BatchHandle(np.column_stack([src, idx]), origin)


# --------------------------------------------------------------------------
# CSV interchange
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_dataset_csv(dataset: SyntheticDataset, path) -> Path:
    path = Path(path)
    header = ["source_id", "example_index", "corrupted", "label"]
    header += [f"f{i}" for i in range(dataset.feature_dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for src in dataset.sources:
            for j in range(src.n):
                row = [src.source_id, j, int(src.corrupted_mask[j]), _fmt(src.labels[j])]
                row += [_fmt(v) for v in src.features[j]]
                writer.writerow(row)
    return path


def read_dataset_csv(path, task=None, num_classes=None) -> SyntheticDataset:
    """Inverse of :func:`write_dataset_csv`.

    The task is inferred from the labels when not given (all integral means
    classification).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["source_id", "example_index", "corrupted", "label"]:
            raise ValueError(f"unexpected dataset header {header[:4]}")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError("dataset file has no examples")
    table = np.array(rows, dtype=float)
    sid = table[:, 0].astype(int)
    labels = table[:, 3]
    if task is None:
        task = "classification" if np.all(labels == np.round(labels)) else "regression"
    if task == "classification":
        labels = labels.astype(np.int64)
        num_classes = num_classes or int(labels.max()) + 1
    sources = []
    for s in np.unique(sid):
        sel = sid == s
        order = np.argsort(table[sel, 1], kind="stable")
        sources.append(
            DataSource(
                int(s),
                table[sel, 4:][order],
                labels[sel][order],
                table[sel, 2][order].astype(bool),
            )
        )
    return SyntheticDataset(
        sources, table.shape[1] - 4, task=task, num_classes=num_classes or 1
    )
