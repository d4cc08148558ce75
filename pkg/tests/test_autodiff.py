import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from probcaps import autodiff as ad
from probcaps.autodiff import Tensor


def test_exp_of_zero():
    assert ad.exp(Tensor([0.0])).data.tolist() == [1.0]


def test_logsumexp_of_two_zeros():
    assert ad.logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_square_gradient():
    (g,) = ad.grad(lambda x: x * x, np.array(3.0))
    assert g == pytest.approx(6.0)


def test_sigmoid_gradient_at_zero():
    (g,) = ad.grad(lambda x: ad.sum_(ad.sigmoid(x)), np.zeros(4))
    np.testing.assert_allclose(g, 0.25)


def test_logsumexp_gradient_is_softmax():
    x = np.array([0.3, -1.2, 2.0])
    (g,) = ad.grad(lambda t: ad.logsumexp(t), x)
    np.testing.assert_allclose(g, np.exp(x) / np.exp(x).sum(), atol=1e-15)


def test_non_scalar_root_rejected():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.parameter(np.ones(3)) * 2.0)


def test_shape_error_names_op():
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


@pytest.mark.parametrize("op", [ad.log, ad.sqrt])
def test_domain_errors(op):
    with pytest.raises(ad.DomainError):
        op(Tensor([-1.0]))


def test_fd_check_quadratic():
    x = np.random.default_rng(0).standard_normal(5)
    assert ad.finite_difference_check(lambda t: ad.sum_(t * t), x) < 1e-6


def test_fd_check_constant():
    assert ad.finite_difference_check(lambda t: ad.sum_(t * 0.0) + 1.0, np.ones(3)) == 0.0


def test_fd_check_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        ad.finite_difference_check(lambda t: ad.sum_(ad.log(t)), np.array([0.5]), eps=0.5)


def test_gradient_accumulates_through_shared_node():
    # x used on two paths: d/dx (x*y + x) = y + 1
    x, y = ad.parameter(2.0), ad.parameter(5.0)
    ad.backward(x * y + x)
    assert x.grad == pytest.approx(6.0)
    assert y.grad == pytest.approx(2.0)


def test_broadcast_gradient_is_reduced():
    (ga, gb) = ad.grad(lambda a, b: ad.sum_(a * b), np.ones((3, 1)), np.arange(4.0))
    np.testing.assert_allclose(ga, np.full((3, 1), 6.0))
    np.testing.assert_allclose(gb, np.full(4, 3.0))


def _grid_sample_loop(source, u, v):
    K, h, w = source.shape
    H, W = u.shape
    out = np.zeros((K, H, W))
    for k in range(K):
        for y in range(H):
            for x in range(W):
                uu, vv = u[y, x], v[y, x]
                x0, y0 = math.floor(uu), math.floor(vv)
                for dy in (0, 1):
                    for dx in (0, 1):
                        xi, yi = x0 + dx, y0 + dy
                        if 0 <= xi < w and 0 <= yi < h:
                            wx = 1 - abs(uu - xi)
                            wy = 1 - abs(vv - yi)
                            out[k, y, x] += wx * wy * source[k, yi, xi]
    return out


def test_grid_sample_matches_loop_oracle():
    rng = np.random.default_rng(1)
    src = rng.random((2, 4, 5))
    u = rng.uniform(-1.5, 5.5, (6, 7))
    v = rng.uniform(-1.5, 4.5, (6, 7))
    np.testing.assert_allclose(ad.grid_sample(Tensor(src), Tensor(u), Tensor(v)).data, _grid_sample_loop(src, u, v), atol=1e-14)


def test_grid_sample_gradients():
    rng = np.random.default_rng(2)
    src = rng.random((1, 3, 3))
    u = rng.uniform(0.1, 1.9, (2, 2))
    v = rng.uniform(0.1, 1.9, (2, 2))
    assert ad.finite_difference_check(lambda s: ad.sum_(ad.grid_sample(s, u, v) ** 2), src) < 1e-6
    assert ad.finite_difference_check(lambda uu: ad.sum_(ad.grid_sample(src, uu, v) ** 2), u) < 1e-6


def test_getitem_gradient_with_repeated_fancy_index():
    (g,) = ad.grad(lambda x: ad.sum_(x[np.array([0, 0, 2])]), np.zeros(3))
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 4, elements=finite))
def test_softmax_sums_to_one(x):
    assert ad.softmax(Tensor(x)).data.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite))
def test_product_rule(a, b):
    ga, gb = ad.grad(lambda x, y: ad.sum_(x * y), a, b)
    np.testing.assert_allclose(ga, b)
    np.testing.assert_allclose(gb, a)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-30, 30)))
def test_log_sigmoid_stable(x):
    out = ad.log_sigmoid(Tensor(x)).data
    assert np.all(np.isfinite(out)) and np.all(out <= 0)
