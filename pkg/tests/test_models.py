import numpy as np
import pytest

from scalebio.models import InnerModel
from scalebio.oracle import finite_diff_grad, relative_error
from scalebio.problems import SourceSpec, gen_sources, planted_parameter


def _data(task, classes=3, n=25, d=4):
    w = planted_parameter(d, 0, num_classes=None if task == "regression" else classes)
    return gen_sources([SourceSpec(n, w, task=task)], seed=0)


CASES = [
    ("linear_regression", "regression", 1),
    ("logistic_regression", "classification", 3),
    ("mlp1", "classification", 3),
    ("mlp1", "regression", 1),
]


@pytest.mark.parametrize("kind,task,k", CASES)
def test_weighted_gradient_matches_fd(kind, task, k):
    data = _data(task, max(k, 2))
    model = InnerModel(kind, 4, k, task=task)
    r = np.random.default_rng(0)
    weights = r.random(data.n_total)
    for _ in range(3):
        w = r.standard_normal(model.dim)
        _, g = model.losses_and_grad(w, data.features, data.labels, weights)
        fd = finite_diff_grad(lambda x: float(weights @ model.losses(x, data.features, data.labels)), w)
        assert relative_error(g, fd) < 1e-6


@pytest.mark.parametrize("kind,task,k", CASES[:2])
def test_hessian_matches_fd(kind, task, k):
    data = _data(task, max(k, 2))
    model = InnerModel(kind, 4, k)
    r = np.random.default_rng(1)
    weights = r.random(data.n_total)
    w = r.standard_normal(model.dim)
    hess = model.hessian(w, data.features, weights)
    grad = lambda x: model.losses_and_grad(x, data.features, data.labels, weights)[1]  # noqa: E731
    fd = np.column_stack([(grad(w + 1e-6 * e) - grad(w - 1e-6 * e)) / 2e-6 for e in np.eye(model.dim)])
    np.testing.assert_allclose(hess, fd, atol=1e-7)


def test_mlp_has_no_analytic_hessian():
    model = InnerModel("mlp1", 4, 2)
    with pytest.raises(NotImplementedError):
        model.hessian(np.zeros(model.dim), np.zeros((1, 4)), np.ones(1))
    assert model.curvature_factor() is None


def test_model_validation():
    with pytest.raises(ValueError):
        InnerModel("tree", 3)
    with pytest.raises(ValueError):
        InnerModel("logistic_regression", 3, 1)
    with pytest.raises(ValueError):
        InnerModel("linear_regression", 3, ridge=-1)
    with pytest.raises(ValueError):
        InnerModel("logistic_regression", 3, 2, task="regression")


def test_mlp_init_is_seeded_and_small():
    model = InnerModel("mlp1", 3, 2)
    a, b = model.init_params(4), model.init_params(4)
    assert np.array_equal(a, b) and model.hidden == 8
    assert 0.05 < a.std() < 0.2


def test_accuracy():
    model = InnerModel("logistic_regression", 2, 2)
    w = np.array([1.0, -1.0, -1.0, 1.0])
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert model.accuracy(w, x, np.array([0, 1])) == 1.0
    assert model.accuracy(w, x, np.array([1, 1])) == 0.5
    with pytest.raises(ValueError):
        InnerModel("linear_regression", 2).accuracy(np.zeros(2), x, np.zeros(2))
