"""Small analytic inner models with hand-coded gradients.

Parameters are always a flat float vector.  Losses are per example; the
regularizer lives in the bilevel problems, not here.
"""

from __future__ import annotations

import numpy as np

KINDS = ("linear_regression", "logistic_regression", "mlp1")


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class InnerModel:
    """Linear regression, multinomial logistic regression, or a one-hidden-layer
    tanh network (``mlp1``).

    ``num_outputs`` is the number of classes for classification and 1 for
    regression.  ``mlp1`` uses squared loss when ``task="regression"`` and
    cross-entropy otherwise.
    """

    def __init__(self, kind, feature_dim, num_outputs=1, ridge=1e-3, hidden=8, task=None):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        if ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if task is None:
            task = "regression" if kind == "linear_regression" else "classification"
        if kind == "linear_regression" and task != "regression":
            raise ValueError("linear_regression is a regression model")
        if kind == "logistic_regression" and task != "classification":
            raise ValueError("logistic_regression is a classification model")
        if task == "regression":
            num_outputs = 1
        elif num_outputs < 2:
            raise ValueError("classification needs at least two classes")
        self.kind = kind
        self.task = task
        self.feature_dim = int(feature_dim)
        self.num_outputs = int(num_outputs)
        self.ridge = float(ridge)
        self.hidden = int(hidden)

        d, k, h = self.feature_dim, self.num_outputs, self.hidden
        if kind == "linear_regression":
            self.dim = d
        elif kind == "logistic_regression":
            self.dim = d * k
        else:
            self.dim = d * h + h + h * k + k

    def init_params(self, seed=0, scale=0.1):
        rng = np.random.default_rng([seed, 0x6D6C70])
        return scale * rng.standard_normal(self.dim)

    def _unpack_mlp(self, w):
        d, h, k = self.feature_dim, self.hidden, self.num_outputs
        i = 0
        w1 = w[i:i + d * h].reshape(d, h); i += d * h
        b1 = w[i:i + h]; i += h
        w2 = w[i:i + h * k].reshape(h, k); i += h * k
        b2 = w[i:i + k]
        return w1, b1, w2, b2

    def predict(self, w, x):
        """Raw outputs: shape ``(n,)`` for regression, logits ``(n, K)`` otherwise."""
        if self.kind == "linear_regression":
            return x @ w
        if self.kind == "logistic_regression":
            return x @ w.reshape(self.feature_dim, self.num_outputs)
        w1, b1, w2, b2 = self._unpack_mlp(w)
        out = np.tanh(x @ w1 + b1) @ w2 + b2
        return out[:, 0] if self.task == "regression" else out

    def losses(self, w, x, y):
        return self.losses_and_grad(w, x, y, None)[0]

    def losses_and_grad(self, w, x, y, weights):
        """Per-example losses and ``sum_i weights[i] * grad loss_i``.

        With ``weights=None`` only the losses are computed (gradient is None).
        """
        if self.kind == "linear_regression":
            resid = x @ w - y
            losses = 0.5 * resid**2
            if weights is None:
                return losses, None
            return losses, x.T @ (weights * resid)

        if self.kind == "logistic_regression":
            z = x @ w.reshape(self.feature_dim, self.num_outputs)
            dz, losses = self._output_loss(z, y, weights is not None)
            if weights is None:
                return losses, None
            return losses, (x.T @ (weights[:, None] * dz)).ravel()

        w1, b1, w2, b2 = self._unpack_mlp(w)
        hid = np.tanh(x @ w1 + b1)
        z = hid @ w2 + b2
        dz, losses = self._output_loss(z, y, weights is not None)
        if weights is None:
            return losses, None
        dz = weights[:, None] * dz
        g_w2 = hid.T @ dz
        g_b2 = dz.sum(axis=0)
        dpre = (dz @ w2.T) * (1.0 - hid**2)
        g_w1 = x.T @ dpre
        g_b1 = dpre.sum(axis=0)
        return losses, np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])

    def _output_loss(self, z, y, need_grad):
        if self.task == "regression":
            resid = z[:, 0] - y
            return (resid[:, None] if need_grad else None), 0.5 * resid**2
        y = np.asarray(y, dtype=np.int64)
        logp = _log_softmax(z)
        rows = np.arange(len(y))
        losses = -logp[rows, y]
        if not need_grad:
            return None, losses
        dz = np.exp(logp)
        dz[rows, y] -= 1.0
        return dz, losses

    def accuracy(self, w, x, y):
        if self.task != "classification":
            raise ValueError("accuracy is defined for classification models only")
        return float(np.mean(self.predict(w, x).argmax(axis=1) == np.asarray(y)))

    def hessian(self, w, x, weights):
        """Dense ``sum_i weights[i] * Hess loss_i`` for the convex models."""
        weights = np.asarray(weights, dtype=float)
        if self.kind == "linear_regression":
            return x.T @ (weights[:, None] * x)
        if self.kind != "logistic_regression":
            raise NotImplementedError("analytic Hessians cover linear and logistic regression only")
        d, k = self.feature_dim, self.num_outputs
        prob = np.exp(_log_softmax(x @ w.reshape(d, k)))
        # Parameter index a*k + c pairs feature a with class c.
        y = (x[:, :, None] * prob[:, None, :]).reshape(len(x), d * k)
        hess = -(y.T @ (weights[:, None] * y))
        for c in range(k):
            block = x.T @ ((weights * prob[:, c])[:, None] * x)
            hess[c::k, c::k] += block
        return hess

    def curvature_factor(self):
        """Bound on the per-example loss Hessian relative to ``x x'``; None if
        the loss is not convex in the parameters."""
        if self.kind == "linear_regression":
            return 1.0
        if self.kind == "logistic_regression":
            return 0.5
        return None
