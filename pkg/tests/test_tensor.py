import numpy as np
import pytest

from unia import tensor as T
from unia.tensor import (
    ContractError,
    DomainError,
    ParameterError,
    ShapeError,
    Tensor,
    grad_check,
)


def rand_tensor(rng, shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((a @ b).data, b.data)


def test_matmul_hand_case():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.shape == (1, 1)
    assert out.item() == 11.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    assert "(2, 3)" in str(exc.value)


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a = rand_tensor(rng, (3, 4))
    b = rand_tensor(rng, (4, 2))
    assert grad_check(lambda x: (x @ b).sum(), a, h=1e-5) < 1e-6
    assert grad_check(lambda x: (a @ x).sum(), b, h=1e-5) < 1e-6


def test_matmul_batched_gradcheck():
    rng = np.random.default_rng(1)
    a = rand_tensor(rng, (2, 3, 4))
    b = rand_tensor(rng, (2, 4, 3))
    assert grad_check(lambda x: ((x @ b) * (x @ b)).sum(), a) < 1e-5
    assert grad_check(lambda x: ((a @ x) * (a @ x)).sum(), b) < 1e-5


# -- softmax ---------------------------------------------------------------

def test_softmax_uniform():
    out = T.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_extreme_values_no_overflow():
    out = T.softmax_lastdim(Tensor([1000.0, 0.0]))
    assert np.isfinite(out.data).all()
    assert out.data[0] == pytest.approx(1.0)
    assert out.data[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((20, 7))
    out = T.softmax_lastdim(Tensor(x))
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    shifted = T.softmax_lastdim(Tensor(x + 3.7))
    np.testing.assert_allclose(out.data, shifted.data, atol=1e-12)


def test_softmax_gradcheck():
    rng = np.random.default_rng(3)
    x = rand_tensor(rng, (2, 5))
    w = Tensor(rng.standard_normal((2, 5)))
    for tau in (1.0, 0.37):
        err = grad_check(lambda t: (T.softmax_lastdim(t, tau) * w).sum(), x, h=1e-5)
        assert err < 1e-6


def test_softmax_requires_positive_temperature():
    with pytest.raises(ParameterError):
        T.softmax_lastdim(Tensor([1.0]), temperature=0.0)


# -- window max pooling ------------------------------------------------------

def window_pool_oracle(x, h, w):
    """Per-window scan with replicate padding on the right/bottom."""
    c, hh, ww = x.shape
    nh, nw = -(-hh // h), -(-ww // w)
    out = np.empty((c, nh * nw))
    for ci in range(c):
        for wi in range(nh):
            for wj in range(nw):
                best = -np.inf
                for oy in range(h):
                    for ox in range(w):
                        yy = min(wi * h + oy, hh - 1)
                        xx = min(wj * w + ox, ww - 1)
                        best = max(best, x[ci, yy, xx])
                out[ci, wi * nw + wj] = best
    return out


def test_window_pool_single_window():
    out = T.window_max_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    assert out.data.tolist() == [[4.0]]


def test_window_pool_constant_input():
    out = T.window_max_pool(Tensor(np.full((2, 4, 4), 0.3)), 2, 2)
    np.testing.assert_array_equal(out.data, np.full((2, 4), 0.3))


def test_window_pool_matches_scan_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 4, 4))
    out = T.window_max_pool(Tensor(x), 2, 2)
    np.testing.assert_array_equal(out.data, window_pool_oracle(x, 2, 2))


@pytest.mark.parametrize("shape", [(1, 2, 2), (2, 3, 5), (4, 8, 8), (3, 7, 6)])
@pytest.mark.parametrize("win", [(1, 1), (2, 2), (3, 2), (2, 3)])
def test_window_pool_oracle_sweep(shape, win):
    rng = np.random.default_rng(hash((shape, win)) % 2**32)
    x = rng.standard_normal(shape)
    out = T.window_max_pool(Tensor(x), *win)
    np.testing.assert_array_equal(out.data, window_pool_oracle(x, *win))


def test_window_pool_tie_routes_to_first_occurrence():
    x = Tensor(np.array([[[1.0, 1.0], [1.0, 1.0]]]), requires_grad=True)
    out = T.window_max_pool(x, 2, 2)
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_window_pool_replicate_pad_gradient_folds_back():
    # 1x1x3 with window 2: second window is [x2, x2_replicated].
    x = Tensor(np.array([[[1.0, 2.0, 5.0]]]), requires_grad=True)
    out = T.window_max_pool(x, 1, 2)
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [[[0.0, 1.0, 1.0]]])


def test_window_pool_rejects_bad_window():
    with pytest.raises(ParameterError):
        T.window_max_pool(Tensor(np.zeros((1, 2, 2))), 0, 2)


def test_window_pool_gradcheck():
    rng = np.random.default_rng(5)
    x = rand_tensor(rng, (2, 4, 6))
    w = Tensor(rng.standard_normal((2, 6)))
    assert grad_check(lambda t: (T.window_max_pool(t, 2, 2) * w).sum(), x) < 1e-6


# -- elementwise suite -------------------------------------------------------

def test_relu_values_and_subgradient_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    out = T.relu(x)
    assert out.data.tolist() == [0.0, 0.0, 2.0]
    out.sum().backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_sigmoid_at_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_extremes_finite():
    out = T.sigmoid(Tensor([-800.0, 800.0]))
    assert np.isfinite(out.data).all()


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_no_nan_inf_after_documented_ops():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((4, 4)) * 50)
    for op in (T.relu, T.sigmoid, T.softplus, T.exp, T.absolute, T.softmax_lastdim):
        assert np.isfinite(op(x).data).all()


ELEMENTWISE_CASES = [
    ("add", lambda x, w: (T.add(x, w * 2.0) * w).sum()),
    ("mul", lambda x, w: (T.mul(x, w) * w).sum()),
    ("sub", lambda x, w: (T.sub(x, w) * w).sum()),
    ("div", lambda x, w: (T.div(x, T.exp(w)) * w).sum()),
    ("relu", lambda x, w: (T.relu(x) * w).sum()),
    ("sigmoid", lambda x, w: (T.sigmoid(x) * w).sum()),
    ("softplus", lambda x, w: (T.softplus(x) * w).sum()),
    ("exp", lambda x, w: (T.exp(x) * w).sum()),
    ("log", lambda x, w: (T.log(T.exp(x)) * w).sum()),
    ("sqrt", lambda x, w: (T.sqrt(T.exp(x)) * w).sum()),
    ("abs", lambda x, w: (T.absolute(x) * w).sum()),
    ("mean", lambda x, w: (x.mean(axis=0) * w.mean(axis=0)).sum()),
    ("sum_axis", lambda x, w: (x.sum(axis=1, keepdims=True) * w).sum()),
    ("pow", lambda x, w: (T.pow_scalar(T.exp(x), 1.7) * w).sum()),
    ("max_lastdim", lambda x, w: (T.max_lastdim(x) * w.mean(axis=1)).sum()),
    ("clamp_min", lambda x, w: (T.clamp_min(x, 0.25) * w).sum()),
    ("reshape", lambda x, w: (x.reshape(-1) * w.reshape(-1)).sum()),
    ("transpose", lambda x, w: (x.transpose((1, 0)) * w.transpose((1, 0))).sum()),
    ("pad2d", lambda x, w: (T.pad2d(x, 1, 2, 0, 1) ** 2).sum()),
    ("gather", lambda x, w: (T.gather_flat(x, [3, 1, 1, 0]) ** 2).sum()),
    ("concat", lambda x, w: (T.concat([x, w], axis=0) ** 2).sum()),
    ("softmax", lambda x, w: (T.softmax_lastdim(x) * w).sum()),
]


@pytest.mark.parametrize("name,f", ELEMENTWISE_CASES, ids=[c[0] for c in ELEMENTWISE_CASES])
def test_gradcheck_every_op(name, f):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = rand_tensor(rng, (3, 4))
    w = Tensor(rng.standard_normal((3, 4)))
    assert grad_check(lambda t: f(t, w), x, h=1e-5) < 1e-5


def test_broadcast_unbroadcast_gradcheck():
    rng = np.random.default_rng(7)
    x = rand_tensor(rng, (3, 1, 4))
    y = Tensor(rng.standard_normal((2, 4)))
    assert grad_check(lambda t: ((t + y) * (t * y)).sum(), x) < 1e-5
    bias = rand_tensor(rng, (4,))
    assert grad_check(lambda b: ((x + b) ** 2).sum(), bias) < 1e-5


# -- grad_check contract ------------------------------------------------------

def test_grad_check_sum_is_exact():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert grad_check(lambda t: t.sum(), x) < 1e-10


def test_grad_check_quadratic_hand_derivative():
    x = Tensor([1.0, 2.0], requires_grad=True)
    out = (x * x).sum()
    out.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    assert grad_check(lambda t: (t * t).sum(), x) < 1e-8


def test_grad_check_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        grad_check(lambda t: t * 2.0, x)


def test_grad_check_rejects_bad_step():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ParameterError):
        grad_check(lambda t: t.sum(), x, h=1e-2)


# -- tape behavior ------------------------------------------------------------

def test_fanout_accumulates_additively():
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0 + x * 5.0
    y.sum().backward()
    assert x.grad.tolist() == [7.0]


def test_backward_deterministic_bitwise():
    def run():
        rng = np.random.default_rng(11)
        x = rand_tensor(rng, (6, 6))
        w = Tensor(rng.standard_normal((6, 6)))
        out = (T.softmax_lastdim(x @ w) * T.sigmoid(x)).sum()
        out.backward()
        return x.grad.tobytes()

    assert run() == run()


def test_no_grad_suppresses_recording():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert y._parents == ()


def test_detach_cuts_graph():
    x = Tensor([2.0], requires_grad=True)
    y = (x * 3.0).detach() * x
    y.sum().backward()
    assert x.grad.tolist() == [6.0]
