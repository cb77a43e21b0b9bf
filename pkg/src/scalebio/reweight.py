"""Data-reweighting bilevel problems.

:class:`SourceReweightProblem` learns a softmax mixture over data sources;
:class:`HyperCleanProblem` learns one sigmoid weight per training example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import InnerModel
from .problems import (
    BilevelProblem,
    ProblemConstants,
    SamplerConfig,
    SyntheticDataset,
    sample_batch,
)


def softmax(lam):
    lam = np.asarray(lam, dtype=float)
    if not np.all(np.isfinite(lam)):
        raise ValueError("softmax input must be finite")
    e = np.exp(lam - lam.max())
    return e / e.sum()


def softmax_jacobian_apply(p, g):
    """``J' g`` for ``J_ij = p_i (delta_ij - p_j)``; the result sums to zero."""
    p = np.asarray(p, dtype=float)
    g = np.asarray(g, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: p{p.shape} vs g{g.shape}")
    return p * (g - p @ g)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MixtureWeights:
    lam: np.ndarray

    @property
    def p(self):
        return softmax(self.lam)


def _check_origin(batch, origin):
    if batch is not None and batch.origin != origin:
        raise ValueError(f"expected a {origin} batch, got {batch.origin}")


def _data_constants(model: InnerModel, x_trn_blocks, x_val, y_val, strong, l2_scale, l1_scale, radius=10.0):
    """Upper bounds on the smoothness constants, or None for nonconvex models."""
    factor = model.curvature_factor()
    if factor is None:
        return None
    def top(x, scale):
        return float(np.linalg.eigvalsh(x.T @ x)[-1]) * scale(len(x))
    ell21 = factor * max(top(x, l2_scale) for x in x_trn_blocks) + strong
    ell11 = factor * top(x_val, l1_scale)
    if model.kind == "logistic_regression":
        ell10 = float(np.sqrt(2.0) * np.linalg.norm(x_val, axis=1).sum() * l1_scale(len(x_val)))
    else:
        # valid on the ball |w| <= radius
        ell10 = ell11 * radius + float(np.linalg.norm(x_val.T @ y_val)) * l1_scale(len(x_val))
    return ProblemConstants(mu2=strong, ell10=ell10, ell11=ell11, ell21=ell21, ell22=None)


class SourceReweightProblem(BilevelProblem):
    """Softmax source reweighting.

    ``L2(lambda, w) = sum_i p_i / n_i sum_j loss(w; a_ij) + ridge/2 |w|^2`` and
    ``L1(lambda, w)`` is the mean validation loss.  Minibatch estimates scale
    each example by ``m * p_source`` so that, under uniform-source sampling,
    the batch value is unbiased for the full objective.
    """

    reports_mixture = True

    def __init__(self, dataset: SyntheticDataset, validation: SyntheticDataset, model: InnerModel):
        if dataset.feature_dim != model.feature_dim or validation.feature_dim != model.feature_dim:
            raise ValueError("model and data feature dimensions differ")
        self.dataset = dataset
        self.validation = validation
        self.model = model
        self.dim_lambda = dataset.m
        self.dim_w = model.dim
        self._x = dataset.features
        self._y = dataset.labels
        self._src = dataset.source_index
        self._sizes = dataset.sizes.astype(float)
        self._xv = validation.features
        self._yv = validation.labels
        blocks = [s.features for s in dataset.sources]
        self.constants = _data_constants(
            model, blocks, self._xv, self._yv, model.ridge, lambda n: 1.0 / n, lambda n: 1.0 / n
        )

    def weighted_train_loss_and_grads(self, lam, w, batch=None):
        """``(value, grad_w, grad_lambda)`` of the weighted training loss."""
        _check_origin(batch, "train")
        p = softmax(lam)
        m = self.dataset.m
        if batch is None:
            src = self._src
            x, y = self._x, self._y
            weights = (p / self._sizes)[src]
            per_source = 1.0 / self._sizes
        else:
            flat = self.dataset.flat_index(batch.example_refs)
            src = batch.sources
            x, y = self._x[flat], self._y[flat]
            weights = m * p[src] / len(batch)
            per_source = np.full(m, m / len(batch))
        losses, grad = self.model.losses_and_grad(w, x, y, weights)
        ridge = self.model.ridge
        value = float(weights @ losses) + 0.5 * ridge * float(w @ w)
        dvalue_dp = np.bincount(src, weights=losses, minlength=m) * per_source
        return value, grad + ridge * w, softmax_jacobian_apply(p, dvalue_dp)

    def l2(self, lam, w, batch=None):
        _check_origin(batch, "train")
        p = softmax(lam)
        if batch is None:
            losses = self.model.losses(w, self._x, self._y)
            weights = (p / self._sizes)[self._src]
        else:
            flat = self.dataset.flat_index(batch.example_refs)
            losses = self.model.losses(w, self._x[flat], self._y[flat])
            weights = self.dataset.m * p[batch.sources] / len(batch)
        return float(weights @ losses) + 0.5 * self.model.ridge * float(w @ w)

    def l2_grads(self, lam, w, batch=None):
        _, gw, gl = self.weighted_train_loss_and_grads(lam, w, batch)
        return gl, gw

    def l2_hessian_ww(self, lam, w):
        """Full-batch ``d^2 L2 / dw^2`` (linear and logistic models)."""
        weights = (softmax(lam) / self._sizes)[self._src]
        return self.model.hessian(w, self._x, weights) + self.model.ridge * np.eye(self.dim_w)

    def _val_arrays(self, batch):
        _check_origin(batch, "val")
        if batch is None:
            return self._xv, self._yv
        flat = self.validation.flat_index(batch.example_refs)
        return self._xv[flat], self._yv[flat]

    def l1(self, lam, w, batch=None):
        x, y = self._val_arrays(batch)
        return float(self.model.losses(w, x, y).mean())

    def l1_grads(self, lam, w, batch=None):
        x, y = self._val_arrays(batch)
        _, g = self.model.losses_and_grad(w, x, y, np.full(len(x), 1.0 / len(x)))
        return np.zeros(self.dim_lambda), g

    def draw_batch(self, config: SamplerConfig, origin, step):
        data = self.dataset if origin == "train" else self.validation
        return sample_batch(data, config, origin, step)

    def initial_point(self, seed=0, scale=0.1):
        return np.zeros(self.dim_lambda), self.model.init_params(seed, scale)


class HyperCleanProblem(BilevelProblem):
    """Per-example sigmoid weights over a (possibly corrupted) training set.

    ``L2(lambda, u) = sum_i sigmoid(lambda_i) loss(u; xi_i) + c |u|^2`` and
    ``L1 = sum_j loss(u; xi_j)`` over the validation set.  Minibatch values are
    scaled by ``n / B`` so they estimate these sums without bias.
    """

    reports_mixture = False

    def __init__(self, dataset: SyntheticDataset, validation: SyntheticDataset, model: InnerModel, c=0.001):
        if c <= 0:
            raise ValueError("regularizer c must be positive")
        self.dataset = dataset
        self.validation = validation
        self.model = model
        self.c = float(c)
        self._x = dataset.features
        self._y = dataset.labels
        self._xv = validation.features
        self._yv = validation.labels
        self.dim_lambda = dataset.n_total
        self.dim_w = model.dim
        self.constants = _data_constants(
            model, [self._x], self._xv, self._yv, 2.0 * self.c, lambda n: 1.0, lambda n: 1.0
        )

    def _train_arrays(self, batch):
        _check_origin(batch, "train")
        n = len(self._x)
        if batch is None:
            return np.arange(n), 1.0
        return self.dataset.flat_index(batch.example_refs), n / len(batch)

    def hyperclean_loss_and_grads(self, lam, u, batch=None):
        """``(value, grad_u, grad_lambda)`` of the weighted training sum."""
        lam = np.asarray(lam, dtype=float)
        if lam.shape != (self.dim_lambda,) or np.shape(u) != (self.dim_w,):
            raise ValueError("dimension mismatch")
        idx, scale = self._train_arrays(batch)
        s = sigmoid(lam[idx])
        losses, grad = self.model.losses_and_grad(u, self._x[idx], self._y[idx], scale * s)
        value = scale * float(s @ losses) + self.c * float(u @ u)
        grad_lam = np.zeros(self.dim_lambda)
        np.add.at(grad_lam, idx, scale * s * (1.0 - s) * losses)
        return value, grad + 2.0 * self.c * u, grad_lam

    def l2(self, lam, w, batch=None):
        idx, scale = self._train_arrays(batch)
        s = sigmoid(np.asarray(lam, dtype=float)[idx])
        losses = self.model.losses(w, self._x[idx], self._y[idx])
        return scale * float(s @ losses) + self.c * float(w @ w)

    def l2_grads(self, lam, w, batch=None):
        _, gw, gl = self.hyperclean_loss_and_grads(lam, w, batch)
        return gl, gw

    def l2_hessian_ww(self, lam, w):
        """Full-batch ``d^2 L2 / du^2`` (linear and logistic models)."""
        s = sigmoid(np.asarray(lam, dtype=float))
        return self.model.hessian(w, self._x, s) + 2.0 * self.c * np.eye(self.dim_w)

    def _val_arrays(self, batch):
        _check_origin(batch, "val")
        if batch is None:
            return self._xv, self._yv, 1.0
        flat = self.validation.flat_index(batch.example_refs)
        return self._xv[flat], self._yv[flat], len(self._xv) / len(batch)

    def l1(self, lam, w, batch=None):
        x, y, scale = self._val_arrays(batch)
        return scale * float(self.model.losses(w, x, y).sum())

    def l1_grads(self, lam, w, batch=None):
        x, y, scale = self._val_arrays(batch)
        _, g = self.model.losses_and_grad(w, x, y, np.full(len(x), scale))
        return np.zeros(self.dim_lambda), g

    def draw_batch(self, config: SamplerConfig, origin, step):
        data = self.dataset if origin == "train" else self.validation
        return sample_batch(data, config, origin, step)

    def initial_point(self, seed=0, scale=0.1):
        return np.zeros(self.dim_lambda), self.model.init_params(seed, scale)
