import numpy as np
import pytest

from mckd import tensor as T
from mckd.tensor import (
    GraphError,
    ShapeError,
    Tensor,
    backward,
    concat,
    detach,
    dot,
    finite_diff_grad,
    gather_rows,
    l2_normalize,
    log_softmax,
    select_columns,
    softmax,
    take_rows,
    tmean,
    tsum,
)

RNG = np.random.default_rng(7)


def _fd_check(f, x_data, rtol=1e-4, atol=1e-7, h=1e-6):
    x = Tensor(np.asarray(x_data, dtype=np.float64), requires_grad=True)
    loss = f(x)
    g = backward(loss)[x].data
    fd = finite_diff_grad(f, x, h=h)
    np.testing.assert_allclose(g, fd, rtol=rtol, atol=atol)


def test_trivial_forward_values():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-12)


def test_backward_simple_analytic():
    x = Tensor(3.0, requires_grad=True)
    assert backward(x * x)[x].data == pytest.approx(6.0)

    x = Tensor(-1.0, requires_grad=True)
    assert backward(T.relu(x))[x].data == pytest.approx(0.0)
    x0 = Tensor(0.0, requires_grad=True)
    assert backward(T.relu(x0))[x0].data == pytest.approx(0.0)  # tie at 0 -> 0


def test_second_order_cube():
    x = Tensor(2.0, requires_grad=True)
    y = x * x * x
    g = backward(y)[x]
    g2 = backward(g)[x]
    assert g.data == pytest.approx(12.0)
    assert g2.data == pytest.approx(12.0)  # d2/dx2 x^3 = 6x


def test_detach_contract():
    x = Tensor(3.0, requires_grad=True)
    d = detach(x)
    assert d.data == x.data and not d.requires_grad
    loss = x * d
    assert backward(loss)[x].data == pytest.approx(3.0)  # one factor frozen

    all_detached = detach(x) * detach(x)
    assert backward(all_detached) == {}  # empty map, not a failure


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * x)


def test_finite_diff_basics():
    x = Tensor(3.0)
    g = finite_diff_grad(lambda t: t * t, x)
    assert g == pytest.approx(6.0, abs=1e-6)
    const = finite_diff_grad(lambda t: Tensor(1.5), Tensor([1.0, -2.0, 0.5]))
    assert np.array_equal(const, np.zeros(3))


_BIAS_ROW = Tensor(RNG.normal(size=(1, 4)))
_COL = Tensor(RNG.normal(size=(3, 1)))
_DENOM = Tensor(RNG.uniform(1.0, 2.0, size=(3, 4)))
_W42 = Tensor(RNG.normal(size=(4, 2)))
_W32 = Tensor(RNG.normal(size=(3, 2)))
_C4 = Tensor(RNG.normal(size=4))
_C34 = Tensor(RNG.normal(size=(3, 4)))
_C5 = Tensor(RNG.normal(size=5))


@pytest.mark.parametrize(
    "name,f,shape",
    [
        ("add_bias_row", lambda x: tsum(T.exp(x + _BIAS_ROW)), (3, 4)),
        ("sub", lambda x: tsum(T.sigmoid(x - 0.3) * x), (3, 4)),
        ("mul_broadcast", lambda x: tsum(x * _COL), (3, 4)),
        ("div", lambda x: tsum(x / _DENOM), (3, 4)),
        ("scalar_coef", lambda x: tsum(x * 2.5), (3, 4)),
        ("matmul", lambda x: tsum(T.relu(x @ _W42)), (3, 4)),
        ("pow", lambda x: tsum((x * x + 1.0) ** 1.5), (5,)),
        ("exp", lambda x: tsum(T.exp(x)), (4,)),
        ("log", lambda x: tsum(T.log(x * x + 1.2)), (4,)),
        ("sqrt", lambda x: tsum(T.sqrt(x * x + 0.7)), (4,)),
        ("sigmoid", lambda x: tsum(T.sigmoid(x)), (6,)),
        ("mean_axis", lambda x: tsum(tmean(x, axis=0) * _C4), (3, 4)),
        ("sum_keepdims", lambda x: tsum(x * tsum(x, axis=1, keepdims=True)), (3, 4)),
        ("softmax", lambda x: tsum(softmax(x) * _C34), (3, 4)),
        ("log_softmax", lambda x: tsum(log_softmax(x) * _C34), (3, 4)),
        ("l2_normalize", lambda x: tsum(l2_normalize(x) * _C34), (3, 4)),
        ("transpose", lambda x: tsum(T.transpose(x) @ _W32), (3, 4)),
        ("reshape", lambda x: tsum(T.reshape(x, (2, 6)) ** 2.0), (3, 4)),
        ("slice", lambda x: tsum(x[1:3, 0:2] * 3.0), (4, 4)),
        ("dot", lambda x: dot(x, _C5), (5,)),
    ],
)
def test_gradient_matches_finite_differences(name, f, shape):
    _fd_check(f, RNG.normal(size=shape))


def test_relu_gradient_matches_fd_away_from_kink():
    x = RNG.normal(size=(3, 4))
    x[np.abs(x) < 1e-3] += 0.1  # keep FD probes off the kink
    _fd_check(lambda t: tsum(T.relu(t) * 1.7), x)


def test_gather_take_select_grads():
    idx = np.array([[1, 2, 0], [2, 0, 1], [0, 1, 3], [3, 2, 1]])
    _fd_check(lambda x, c=Tensor(RNG.normal(size=(4, 3))): tsum(gather_rows(x, idx) * c), RNG.normal(size=(4, 4)))
    order = np.array([2, 0, 0, 1])
    _fd_check(lambda x, c=Tensor(RNG.normal(size=(4, 3))): tsum(take_rows(x, order) * c), RNG.normal(size=(3, 3)))
    cols = np.array([1, 0, 2])
    _fd_check(lambda x, c=Tensor(RNG.normal(size=3)): tsum(select_columns(x, cols) * c), RNG.normal(size=(3, 4)))


def test_concat_grads():
    b = Tensor(RNG.normal(size=(3, 2)), requires_grad=True)

    def f(x):
        return tsum(concat([x, b], axis=1) * Tensor(np.arange(15.0).reshape(3, 5)))

    _fd_check(f, RNG.normal(size=(3, 3)))


def test_softmax_rows_normalized_and_shift_invariant():
    x = RNG.normal(size=(50, 9)) * 10
    p = softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    p_shift = softmax(Tensor(x + 123.456)).data
    np.testing.assert_allclose(p, p_shift, atol=1e-9)
    assert np.isfinite(softmax(Tensor(np.array([[1e4, 0.0, -1e4]]))).data).all()


def test_softmax_cross_entropy_grad_parity():
    # agreement within 1e-4 relative error at 64-bit (spec example)
    y = np.array([2, 0, 1])

    def f(z):
        return -tmean(select_columns(log_softmax(z), y))

    _fd_check(f, RNG.normal(size=(3, 5)), rtol=1e-4)


def test_second_order_softmax_hvp_matches_fd_of_gradient():
    c = Tensor(RNG.normal(size=4))
    x0 = RNG.normal(size=4)
    v = RNG.normal(size=4)

    def grad_at(xd):
        x = Tensor(xd, requires_grad=True)
        g = backward(tsum(softmax(x) * c))[x]
        return x, g

    x, g = grad_at(x0)
    hv = backward(tsum(g * Tensor(v)))[x].data

    h = 1e-5
    _, gp = grad_at(x0 + h * v)
    _, gm = grad_at(x0 - h * v)
    hv_fd = (gp.data - gm.data) / (2 * h)
    np.testing.assert_allclose(hv, hv_fd, rtol=1e-3, atol=1e-8)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(3, 2\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_no_grad_inputs_build_no_graph():
    a = Tensor(np.ones((2, 2)))
    out = a @ a + a
    assert not out.requires_grad and out._vjp is None


def test_requires_grad_false_never_accumulates():
    frozen = Tensor([1.0, 2.0])
    x = Tensor([3.0, 4.0], requires_grad=True)
    grads = backward(tsum(x * frozen))
    assert frozen not in grads and x in grads


def test_backward_wrt_intermediate():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    z = y * y  # z = x^4, dz/dy = 2y = 8
    gy = backward(z, wrt=[y])[y]
    assert gy.data == pytest.approx(8.0)
    # the adjoint is itself differentiable back to x: d(2y)/dx = 4x
    assert backward(gy)[x].data == pytest.approx(8.0)
