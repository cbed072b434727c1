import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxkg import autodiff as ad


def test_softplus_at_zero_is_ln2():
    out = ad.softplus(ad.Tensor(0.0))
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_softplus_gradient_at_zero_is_half():
    x = ad.Tensor(0.0, requires_grad=True)
    ad.backward(ad.softplus(x))
    assert x.grad == pytest.approx(0.5, abs=1e-15)


def test_matmul_identity():
    x = np.arange(6, dtype=float).reshape(2, 3)
    out = ad.matmul(ad.Tensor(np.eye(2)), ad.Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_max_reduce_values_and_routing():
    x = ad.Tensor(np.array([3.0, -1.0, 7.0]), requires_grad=True)
    out = ad.max_reduce(x)
    assert out.item() == 7.0
    ad.backward(out)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_max_reduce_tie_routes_to_lowest_index():
    x = ad.Tensor(np.array([[5.0, 5.0, 1.0]]), requires_grad=True)
    ad.backward(ad.sum_(ad.max_reduce(x, axis=1)))
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_product_rule():
    x = ad.Tensor(2.0, requires_grad=True)
    y = ad.Tensor(3.0, requires_grad=True)
    ad.backward(x * y)
    assert x.grad == pytest.approx(3.0)
    assert y.grad == pytest.approx(2.0)


def test_unreachable_leaf_gets_zero_gradient():
    x = ad.Tensor(1.0, requires_grad=True)
    unused = ad.Tensor(np.ones(3), requires_grad=True)
    ad.backward(x * x, leaves=[x, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_backward_requires_scalar_root_without_seed():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(x * 2.0)


def test_backward_linearity_is_exact():
    rng = np.random.default_rng(0)
    xv = rng.normal(size=(4, 3))
    x1 = ad.Tensor(xv.copy(), requires_grad=True)
    f = ad.sum_(ad.softplus(x1) * 2.0)
    g = ad.sum_(ad.exp(x1 * 0.1))
    ad.backward(f + g)
    combined = x1.grad.copy()

    x2 = ad.Tensor(xv.copy(), requires_grad=True)
    ad.backward(ad.sum_(ad.softplus(x2) * 2.0))
    ad.backward(ad.sum_(ad.exp(x2 * 0.1)))
    np.testing.assert_array_equal(combined, x2.grad)


def test_grad_accumulates_across_shared_subexpressions():
    x = ad.Tensor(3.0, requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1 = 7
    ad.backward(y)
    assert x.grad == pytest.approx(7.0)


def test_maximum_tie_routes_to_first_argument():
    a = ad.Tensor(2.0, requires_grad=True)
    b = ad.Tensor(2.0, requires_grad=True)
    ad.backward(ad.maximum(a, b))
    assert a.grad == 1.0 and b.grad == 0.0


def test_broadcast_add_unbroadcasts_gradient():
    a = ad.Tensor(np.zeros((2, 3)), requires_grad=True)
    b = ad.Tensor(np.zeros(3), requires_grad=True)
    ad.backward(ad.sum_(a + b))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, 2 * np.ones(3))


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        ad.log(ad.Tensor(np.array([1.0, 0.0])))


def test_prod_zero_aware_gradient():
    x = ad.Tensor(np.array([[2.0, 0.0, 3.0]]), requires_grad=True)
    ad.backward(ad.sum_(ad.prod(x)))
    np.testing.assert_allclose(x.grad, [[0.0, 6.0, 0.0]])

    y = ad.Tensor(np.array([[0.0, 0.0, 3.0]]), requires_grad=True)
    ad.backward(ad.sum_(ad.prod(y)))
    np.testing.assert_array_equal(y.grad, [[0.0, 0.0, 0.0]])


def test_gather_rows_accumulates_duplicate_indices():
    x = ad.Tensor(np.arange(6, dtype=float).reshape(3, 2), requires_grad=True)
    out = ad.gather_rows(x, np.array([0, 0, 2]))
    ad.backward(ad.sum_(out))
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_segment_max_forward_and_tie_routing():
    vals = ad.Tensor(np.array([[1.0, 4.0], [3.0, 4.0], [2.0, 9.0]]), requires_grad=True)
    out = ad.segment_max(vals, np.array([0, 0, 1]), 2)
    np.testing.assert_array_equal(out.data, [[3.0, 4.0], [2.0, 9.0]])
    ad.backward(ad.sum_(out))
    # column 1 of segment 0 ties at 4.0; gradient goes to row 0
    np.testing.assert_array_equal(vals.grad, [[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])


def test_segment_max_rejects_empty_segments():
    vals = ad.Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.segment_max(vals, np.array([0, 0]), 2)


def test_concat_splits_gradient():
    a = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    b = ad.Tensor(np.ones((2, 3)), requires_grad=True)
    out = ad.concat([a, b], axis=1)
    assert out.shape == (2, 5)
    ad.backward(ad.sum_(out * ad.Tensor(np.arange(10, dtype=float).reshape(2, 5))))
    np.testing.assert_array_equal(a.grad, [[0.0, 1.0], [5.0, 6.0]])
    np.testing.assert_array_equal(b.grad, [[2.0, 3.0, 4.0], [7.0, 8.0, 9.0]])


def test_slice_gradient():
    x = ad.Tensor(np.arange(8, dtype=float).reshape(2, 4), requires_grad=True)
    ad.backward(ad.sum_(x[:, 1:3]))
    np.testing.assert_array_equal(x.grad, [[0, 1, 1, 0], [0, 1, 1, 0]])


def test_transpose_gradient():
    w = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    x = ad.Tensor(np.array([[1.0, 10.0]]))
    ad.backward(ad.sum_(x @ ad.transpose(w) * ad.Tensor(np.array([[2.0, 5.0]]))))
    # d/dW of 2*(W@x)_1 + 5*(W@x)_2 for column vector x = (1, 10)
    np.testing.assert_array_equal(w.grad, [[2.0, 20.0], [5.0, 50.0]])
    with pytest.raises(ValueError, match="2-D"):
        ad.transpose(ad.Tensor(np.zeros(3)))


def test_sqrt_gradient_zero_at_zero():
    x = ad.Tensor(np.array([0.0, 4.0]), requires_grad=True)
    ad.backward(ad.sum_(ad.sqrt(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.25])


# -- Adam ----------------------------------------------------------------------


def test_adam_first_step_on_quadratic():
    # f(x) = x^2 at x=1: g=2, m_hat=2, v_hat=4, step = lr * 2 / (2 + eps)
    p = ad.Tensor(1.0, requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    ad.backward(p * p)
    opt.step()
    assert p.data == pytest.approx(0.9, abs=1e-8)
    assert opt.step_count == 1


def test_adam_zero_gradient_leaves_params_unchanged():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.5)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1


def test_adam_zero_lr_is_identity():
    p = ad.Tensor(np.array([3.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.0)
    p.grad = np.array([17.0])
    opt.step()
    np.testing.assert_array_equal(p.data, [3.0])


def test_adam_descends_quadratic():
    p = ad.Tensor(5.0, requires_grad=True)
    opt = ad.Adam([p], lr=0.3)
    for _ in range(200):
        opt.zero_grad()
        ad.backward(p * p)
        opt.step()
    assert abs(float(p.data)) < 1e-2


# -- finite differences -----------------------------------------------------------


def test_finite_diff_quadratic():
    err = ad.finite_diff_check(lambda x: x * x, 3.0)
    assert err < 1e-6


def test_finite_diff_constant_function_is_exact():
    err = ad.finite_diff_check(lambda x: ad.sum_(x * 0.0), np.array([1.0, 2.0]))
    assert err == 0.0


def test_finite_diff_multi_param():
    def f(params):
        x, w = params
        return ad.sum_(ad.softplus(ad.matmul(x, w)))

    rng = np.random.default_rng(1)
    err = ad.finite_diff_check(f, [rng.normal(size=(3, 2)), rng.normal(size=(2, 2))])
    assert err < 1e-5


def test_finite_diff_segment_ops():
    seg = np.array([0, 0, 1, 1, 1])

    def f(x):
        return ad.sum_(ad.segment_max(x, seg, 2) * ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])))

    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(5, 2))
    err = ad.finite_diff_check(f, x0)
    assert err < 1e-5


def test_kink_watch_records_relu_distance():
    with ad.kink_watch() as w:
        ad.relu(ad.Tensor(np.array([-0.25, 3.0])))
    assert w.min_gap == pytest.approx(0.25)


def test_kink_watch_records_max_tie_gap():
    with ad.kink_watch() as w:
        ad.maximum(ad.Tensor(1.0), ad.Tensor(1.5))
    assert w.min_gap == pytest.approx(0.5)


def test_replay_determinism():
    def run():
        rng = np.random.default_rng(7)
        x = ad.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        loss = ad.sum_(ad.relu(ad.matmul(x, w)))
        ad.backward(loss)
        return loss.item(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-5, max_value=5, allow_nan=False))
def test_softplus_gradient_matches_sigmoid(x0):
    x = ad.Tensor(x0, requires_grad=True)
    ad.backward(ad.softplus(x))
    expected = 1.0 / (1.0 + math.exp(-x0))
    assert x.grad == pytest.approx(expected, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_random_composition_passes_finite_diff(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-2.0, 2.0, size=(3, 3))
    w0 = rng.uniform(-1.0, 1.0, size=(3, 2))

    def f(params):
        x, w = params
        h = ad.softplus(ad.matmul(x, w))
        return ad.sum_(h * h) + ad.mean(ad.exp(x * 0.3))

    err = ad.finite_diff_check(f, [x0, w0])
    assert err < 1e-5
