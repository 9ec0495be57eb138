"""Gradient and contract tests for the autodiff engine."""
import numpy as np
import pytest
from oracles import check_op_gradient, finite_diff_grad, primitive_cases

from sms import autodiff as ad
from sms.optim import AdamState, GradientError, adam_step


def test_every_primitive_matches_finite_differences():
    for trial in range(4):
        rng = np.random.default_rng(100 + trial)
        for name, build, inputs in primitive_cases(rng):
            try:
                check_op_gradient(build, inputs)
            except AssertionError as exc:
                raise AssertionError(f"{name} (trial {trial}): {exc}") from None


def test_sum_square_example():
    assert float(ad.sum(ad.square(ad.Tensor([3.0, 4.0]))).data) == 25.0


def test_logsumexp_of_two_zeros_is_ln2():
    assert float(ad.logsumexp(ad.Tensor([0.0, 0.0])).data) == pytest.approx(np.log(2.0), abs=1e-12)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 5, 7))
    kernel = np.ones((1, 1, 1, 1))
    y = ad.conv2d(ad.Tensor(x), ad.Tensor(kernel))
    np.testing.assert_array_equal(y.data, x)


def test_backward_square_at_three():
    x = ad.Tensor(3.0, requires_grad=True)
    (g,) = ad.backward(ad.square(x), [x])
    assert float(g) == 6.0


def test_backward_sum_relu():
    x = ad.Tensor([-1.0, 2.0], requires_grad=True)
    (g,) = ad.backward(ad.sum(ad.relu(x)), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0])


def mlp_loss(params, x):
    h = ad.tanh(ad.add(ad.matmul(x, params["w1"]), params["b1"]))
    h = ad.tanh(ad.add(ad.matmul(h, params["w2"]), params["b2"]))
    out = ad.add(ad.matmul(h, params["w3"]), params["b3"])
    return ad.mean(ad.square(out))


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = ad.Tensor(rng.standard_normal((5, 3)))
    params = {
        "w1": ad.Tensor(rng.standard_normal((3, 8)) * 0.5, requires_grad=True),
        "b1": ad.Tensor(np.zeros(8), requires_grad=True),
        "w2": ad.Tensor(rng.standard_normal((8, 8)) * 0.5, requires_grad=True),
        "b2": ad.Tensor(np.zeros(8), requires_grad=True),
        "w3": ad.Tensor(rng.standard_normal((8, 2)) * 0.5, requires_grad=True),
        "b3": ad.Tensor(np.zeros(2), requires_grad=True),
    }
    grads = ad.backward(mlp_loss(params, x), params)
    for name, p in params.items():
        def f(v, name=name):
            trial = dict(params)
            trial[name] = ad.Tensor(v)
            return float(mlp_loss(trial, x).data)

        fd = finite_diff_grad(f, p.data.copy())
        scale = max(np.abs(fd).max(), 1e-8)
        assert np.abs(grads[name] - fd).max() / scale < 1e-5, name


def test_reshape_preserves_sum_exactly():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 4))
    a = float(ad.sum(ad.Tensor(x)).data)
    b = float(ad.sum(ad.reshape(ad.Tensor(x), (3, 8))).data)
    assert a == b


def test_backward_is_deterministic():
    rng = np.random.default_rng(11)
    x = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)

    def run():
        y = ad.sum(ad.square(ad.tanh(ad.matmul(x, x))))
        return ad.backward(y, [x])[0]

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_unreachable_parameter_gets_zero_gradient():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    unused = ad.Tensor([5.0], requires_grad=True)
    grads = ad.backward(ad.sum(x), {"x": x, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], [0.0])


def test_backward_rejects_non_scalar():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.square(x), [x])


def test_shape_mismatch_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as exc:
        ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))
    msg = str(exc.value)
    assert "add" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_domain_errors():
    with pytest.raises(ad.DomainError):
        ad.log(ad.Tensor([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.sqrt(ad.Tensor([-1.0]))
    with pytest.raises(ad.DomainError):
        ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))


def test_no_grad_blocks_graph_construction():
    x = ad.Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.square(x)
    assert not y.requires_grad and y.vjp is None


# -- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = {"w": ad.Tensor([1.0, -2.0], requires_grad=True)}
    state = AdamState()
    out = adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(out["w"].data, p["w"].data)
    assert state.step == 1


def test_adam_first_step_magnitude():
    p = {"w": ad.Tensor(0.0, requires_grad=True)}
    out = adam_step(p, {"w": np.asarray(1.0)}, AdamState(), lr=0.1)
    assert float(out["w"].data) == pytest.approx(-0.1, rel=1e-6)


def test_adam_two_step_hand_trace():
    # Hand-computed recurrence for a scalar with g1=1, g2=-0.5, lr=0.1.
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    g1, g2 = 1.0, -0.5
    m = (1 - b1) * g1
    v = (1 - b2) * g1 * g1
    p_ref = 0.0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    m = b1 * m + (1 - b1) * g2
    v = b2 * v + (1 - b2) * g2 * g2
    p_ref = p_ref - lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)

    params = {"w": ad.Tensor(0.0, requires_grad=True)}
    state = AdamState()
    params = adam_step(params, {"w": np.asarray(g1)}, state, lr=lr)
    params = adam_step(params, {"w": np.asarray(g2)}, state, lr=lr)
    assert float(params["w"].data) == pytest.approx(p_ref, abs=1e-15)


def test_adam_rejects_non_finite_gradient():
    p = {"bad_param": ad.Tensor([1.0], requires_grad=True)}
    with pytest.raises(GradientError, match="bad_param"):
        adam_step(p, {"bad_param": np.asarray([np.nan])}, AdamState(), lr=0.1)
