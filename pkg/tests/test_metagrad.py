import numpy as np
import pytest

from refpop.autodiff import Tape, Tensor, grad_through_update, matmul, reduce_sum, tanh
from helpers import finite_diff, max_rel_err


def quad_loss(params):
    th = params["theta"]
    return reduce_sum(th * th)


def test_maml_toy_analytic():
    # f_inner = f_outer = theta^2, one step: meta-grad = 2*theta*(1-2a)^2
    theta = Tensor(np.array([1.0]), requires_grad=True)
    grads, inner, outer = grad_through_update({"theta": theta}, quad_loss, quad_loss, 0.1)
    assert np.isclose(grads["theta"].data, 1.28)
    assert np.isclose(inner, 1.0)
    assert np.isclose(outer, 0.64)  # (1 - 2a)^2


def test_fomaml_toy_analytic():
    theta = Tensor(np.array([1.0]), requires_grad=True)
    grads, _, _ = grad_through_update({"theta": theta}, quad_loss, quad_loss, 0.1,
                                      first_order=True)
    assert np.isclose(grads["theta"].data, 1.6)  # 2*theta*(1-2a)


def test_alpha_zero_equals_plain_outer_gradient():
    rng = np.random.default_rng(11)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 2)))

    def inner(p):
        return reduce_sum(tanh(matmul(p["w"], x)))

    def outer(p):
        return reduce_sum(tanh(matmul(p["w"], x)) * 0.5)

    grads, _, _ = grad_through_update({"w": w}, inner, outer, 0.0)
    with Tape() as tape:
        (plain,) = tape.grad(outer({"w": w}), [w])
    assert np.array_equal(grads["w"].data, plain.data)


def test_negative_alpha_rejected():
    theta = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValueError):
        grad_through_update({"theta": theta}, quad_loss, quad_loss, -0.01)


def test_second_order_matches_finite_differences_of_composed_objective():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(2, 3)) * 0.7, requires_grad=True)
    x_in = np.asarray(rng.normal(size=(3, 2)))
    x_out = np.asarray(rng.normal(size=(3, 2)))
    alpha = 0.05

    def inner(p):
        return reduce_sum(tanh(matmul(p["w"], Tensor(x_in))))

    def outer(p):
        h = tanh(matmul(p["w"], Tensor(x_out)))
        return reduce_sum(h * h)

    grads, _, _ = grad_through_update({"w": w}, inner, outer, alpha)

    def composed():
        with Tape() as tape:
            gi = tape.grad(inner({"w": w}), [w])[0]
        adapted = Tensor(w.data - alpha * gi.data, requires_grad=True)
        return float(outer({"w": adapted}).data)

    (fd,) = finite_diff(composed, [w.data])
    assert max_rel_err(grads["w"].data, fd) < 1e-3


def test_fomaml_is_outer_gradient_at_adapted_point():
    rng = np.random.default_rng(9)
    w = Tensor(rng.normal(size=(4,)), requires_grad=True)
    c = np.asarray(rng.normal(size=(4,)))

    def inner(p):
        return reduce_sum(p["w"] * p["w"])

    def outer(p):
        d = p["w"] - Tensor(c)
        return reduce_sum(d * d)

    alpha = 0.2
    grads, _, _ = grad_through_update({"w": w}, inner, outer, alpha, first_order=True)
    adapted = w.data - alpha * 2.0 * w.data
    assert np.allclose(grads["w"].data, 2.0 * (adapted - c))
