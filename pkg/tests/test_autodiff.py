import numpy as np
import pytest

from geluless_swin import autodiff as ad
from geluless_swin.errors import ParameterError, ShapeError, UnsupportedPrimitiveError
from geluless_swin.swin import Activation
from gradcases import primitive_cases, toy_block_case


def test_sum_gradient_is_ones():
    p = ad.Parameter(np.arange(6, dtype=np.float32).reshape(2, 3))
    ad.forward_backward([p], lambda: ad.total(ad.param_var(p)))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_kl_of_identical_distributions(rng):
    logits = rng.standard_normal((5, 10)).astype(np.float32)
    p = ad.Parameter(logits.copy())
    loss = ad.forward_backward([p], lambda: ad.kd_loss(ad.param_var(p), logits))
    assert abs(loss) < 1e-7
    assert np.abs(p.grad).max() < 1e-7


def test_two_layer_mlp_matches_finite_differences(rng):
    params = {
        "w1": ad.Parameter(rng.standard_normal((5, 8))),
        "b1": ad.Parameter(rng.standard_normal(8)),
        "w2": ad.Parameter(rng.standard_normal((8, 3))),
        "b2": ad.Parameter(rng.standard_normal(3)),
    }
    x = rng.standard_normal((4, 5))
    labels = np.array([0, 2, 1, 2])

    def loss(p):
        h = ad.gelu(ad.add(ad.matmul(x, ad.param_var(p["w1"])), ad.param_var(p["b1"])))
        z = ad.add(ad.matmul(h, ad.param_var(p["w2"])), ad.param_var(p["b2"]))
        return ad.cross_entropy(z, labels)

    report = ad.grad_check(params, loss)
    assert report.passed, report.max_rel_error


def test_linear_squared_loss_analytic(rng):
    x = rng.standard_normal((6, 4))
    y = rng.standard_normal((6, 2))
    w = ad.Parameter(rng.standard_normal((4, 2)))
    ad.forward_backward([w], lambda: ad.squared_error(ad.matmul(x, ad.param_var(w)), y))
    analytic = 2 * x.T @ (x @ w.value - y)
    rel = np.abs(w.grad - analytic).max() / np.abs(analytic).max()
    assert rel < 1e-6


def test_frozen_parameter_reports_zero(rng):
    params = {"w": ad.Parameter(rng.standard_normal((3, 3))), "b": ad.Parameter(rng.standard_normal(3), trainable=False)}
    x = rng.standard_normal((2, 3))
    report = ad.grad_check(params, lambda p: ad.total(ad.add(ad.matmul(x, ad.param_var(p["w"])), ad.param_var(p["b"]))))
    assert report.max_rel_error["b"] == 0.0
    assert report.passed


def test_frozen_parameter_never_moves(rng):
    p = ad.Parameter(rng.standard_normal(4), trainable=False)
    before = p.value.copy()
    opt = ad.SGD(0.5, 0.9)
    for _ in range(3):
        ad.forward_backward([p], lambda: ad.total(ad.param_var(p)))
        opt.step([p])
    np.testing.assert_array_equal(p.value, before)
    np.testing.assert_array_equal(p.grad, 0)


@pytest.mark.parametrize("name", sorted(primitive_cases()))
def test_primitive_gradients(name):
    params, loss = primitive_cases()[name]
    report = ad.grad_check(params, loss)
    assert report.passed, report.max_rel_error


class TestSGD:
    def test_hand_arithmetic(self):
        p = ad.Parameter(np.array([1.0]))
        opt = ad.SGD(0.1, 0.9)
        p.grad = np.array([1.0])
        opt.step([p])
        assert p.value[0] == pytest.approx(0.9)
        p.grad = np.array([1.0])
        opt.step([p])
        np.testing.assert_allclose(opt.velocity[id(p)], [1.9])
        assert p.value[0] == pytest.approx(0.71)

    def test_zero_grad_no_move(self, rng):
        p = ad.Parameter(rng.standard_normal(5))
        before = p.value.copy()
        ad.SGD(0.1, 0.9).step([p])
        np.testing.assert_array_equal(p.value, before)

    def test_no_momentum_is_vanilla(self, rng):
        p = ad.Parameter(rng.standard_normal(5))
        g = rng.standard_normal(5)
        before = p.value.copy()
        opt = ad.SGD(0.3, 0.0)
        for _ in range(2):
            p.grad = g.copy()
            opt.step([p])
        np.testing.assert_allclose(p.value, before - 2 * 0.3 * g)

    @pytest.mark.parametrize("lr,m", [(0.0, 0.9), (0.1, 1.0), (0.1, -0.1)])
    def test_bad_hyperparameters(self, lr, m):
        with pytest.raises(ParameterError):
            ad.SGD(lr, m)


def test_unsupported_primitive_raises():
    p = ad.Parameter(np.array([0.4, 1.6]))
    with pytest.raises(UnsupportedPrimitiveError, match="round"):
        ad.forward_backward([p], lambda: ad.total(ad.round_nograd(ad.param_var(p))))


def test_backward_needs_scalar():
    p = ad.Parameter(np.ones(3))
    with pytest.raises(ShapeError):
        ad.forward_backward([p], lambda: ad.param_var(p))


def test_gradients_are_deterministic(rng):
    x = rng.standard_normal((4, 6)).astype(np.float32)
    w = ad.Parameter(rng.standard_normal((6, 6)).astype(np.float32))

    def grad():
        ad.forward_backward([w], lambda: ad.total(ad.softmax(ad.matmul(x, ad.param_var(w)))))
        return w.grad.copy()

    np.testing.assert_array_equal(grad(), grad())


def test_no_tape_means_plain_numpy(rng):
    p = ad.Parameter(rng.standard_normal((2, 2)))
    out = ad.matmul(ad.param_var(p), ad.param_var(p))
    assert not out.requires_grad
    np.testing.assert_allclose(out.value, p.value @ p.value)


def test_relu_toy_block_gradients():
    # ReLU kinks: a step of 1e-3 can straddle one, so the difference step shrinks here.
    _, params, loss = toy_block_case(block_index=0, activation=Activation.RELU)
    report = ad.grad_check(params, loss, h=1e-6, max_entries=100)
    assert report.passed, report.max_rel_error
