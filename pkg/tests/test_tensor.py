import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from alzmri import tensor as T
from alzmri.layers import conv2d, maxpool2d
from alzmri.tensor import DomainError, NonFiniteError, ShapeError, Tape, TapeError, Tensor


def central_difference(f, x, h):
    """Independent numeric gradient of a numpy scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


# ---------------------------------------------------------------- elementwise


def test_relu_definition():
    assert T.elementwise("relu", [-1.0, 0.0, 2.0]).data.tolist() == [0, 0, 2]


def test_add_arithmetic():
    assert T.elementwise("add", [1.0, 2.0], [3.0, 4.0]).data.tolist() == [4, 6]


def test_sigmoid_zero():
    assert T.elementwise("sigmoid", [0.0]).data.tolist() == [0.5]


def test_sigmoid_extremes_stay_finite():
    out = T.sigmoid(np.array([-1000.0, 1000.0], dtype=np.float64)).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.add(np.ones((2, 3)), np.ones((3, 2)))


def test_broadcast_size_one():
    out = T.add(np.ones((2, 3)), np.array([[1.0], [2.0]]))
    assert out.data.tolist() == [[2, 2, 2], [3, 3, 3]]


@pytest.mark.parametrize("x", [[0.0, 1.0], [-1.0]])
def test_log_domain_error(x):
    with pytest.raises(DomainError):
        T.log(x)


def test_div_by_zero_is_domain_error():
    with pytest.raises(DomainError):
        T.div([1.0], [0.0])


def test_overflow_is_an_error_not_inf():
    with pytest.raises(NonFiniteError):
        T.exp(np.array([1000.0], dtype=np.float32))


def test_unknown_op_tag():
    with pytest.raises(ValueError):
        T.elementwise("tanh", [1.0])


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(np.eye(2), a).data, a)


def test_matmul_arithmetic():
    assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11]]


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_matches_finite_difference(f64):
    a0 = np.array([[1.0, 1.0]])
    b = np.array([[2.0], [5.0]])
    numeric = central_difference(lambda a: float((a @ b).sum()), a0, 1e-4)
    a = Tensor(a0, requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.matmul(a, b))
    analytic = tape.backward(loss)[a]
    np.testing.assert_allclose(numeric, [[2.0, 5.0]], atol=1e-8)
    np.testing.assert_allclose(analytic, numeric, atol=1e-8)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-7)


def test_softmax_no_overflow():
    out = T.softmax(np.array([1000.0, 0.0], dtype=np.float32)).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)


def test_softmax_closed_form(f64):
    out = T.softmax(np.array([np.log(2.0), np.log(1.0)])).data
    np.testing.assert_allclose(out, [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        T.softmax(np.ones((2, 2)), axis=2)


@settings(deadline=None, max_examples=60)
@given(
    arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=6), elements=st.floats(-50, 50)),
    st.integers(0, 2),
)
def test_softmax_is_a_distribution(x, axis):
    axis = axis % x.ndim
    out = T.softmax(Tensor(x), axis=axis).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


# ---------------------------------------------------------------- reductions


def test_mean_of_constant():
    assert T.reduce("mean", np.full((4, 4), 7.0), (0, 1)).item() == 7.0


def test_sum_arithmetic():
    assert T.reduce("sum", [1.0, 2.0, 3.0]).item() == 6.0


def test_mean_gradient_is_one_over_n():
    x = Tensor(np.arange(8.0), requires_grad=True)
    with Tape() as tape:
        loss = T.mean(x)
    np.testing.assert_allclose(tape.backward(loss)[x], np.full(8, 1 / 8))


def test_max_gradient_routes_to_first_maximum():
    x = Tensor([[3.0, 1.0, 3.0]], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.amax(x, axis=1))
    assert tape.backward(loss)[x].tolist() == [[1, 0, 0]]


# ---------------------------------------------------------------- backward


def test_backward_sum_is_all_ones():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(w)
    assert np.array_equal(tape.backward(loss)[w], np.ones((2, 3)))


def test_backward_relu_mask():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.relu(x))
    assert tape.backward(loss)[x].tolist() == [0, 1]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_backward_twice_fails():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum(x * x)
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_watched_intermediate_receives_gradient():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        h = tape.watch(x * 2)
        loss = T.sum(h * h)
    g = tape.backward(loss)
    np.testing.assert_allclose(g[h], 2 * h.data)
    np.testing.assert_allclose(g[x], 8 * x.data)


def test_module_level_backward_uses_recording_tape():
    x = Tensor([3.0], requires_grad=True)
    with Tape():
        loss = T.sum(x * x)
    assert T.backward(loss)[x].tolist() == [6.0]


def test_four_parameter_toy_net(f64):
    # y = sigmoid(w1*x + b1) * w2 + b2 on two inputs, squared loss
    xs = np.array([0.3, -1.2])
    ts = np.array([0.5, -0.1])
    p0 = np.array([0.7, -0.2, 1.3, 0.1])

    def f_np(p):
        h = 1 / (1 + np.exp(-(p[0] * xs + p[1])))
        return float(np.sum((h * p[2] + p[3] - ts) ** 2))

    def f(p):
        h = T.sigmoid(p[0] * Tensor(xs) + p[1])
        return T.sum(T.square(h * p[2] + p[3] - ts))

    numeric = central_difference(f_np, p0, 1e-5)
    p = Tensor(p0, requires_grad=True)
    with Tape() as tape:
        loss = f(p)
    assert T.relative_error(tape.backward(loss)[p], numeric) < 1e-6


# ---------------------------------------------------------------- finite differences


def test_fd_sum_of_squares(f64):
    assert T.finite_difference_check(lambda x: T.sum(x * x), np.array([3.0]), 1e-5) < 1e-9


def test_fd_sigmoid_at_zero(f64):
    x = Tensor(np.array([0.0]), requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.sigmoid(x))
    assert tape.backward(y)[x].item() == pytest.approx(0.25)
    assert T.finite_difference_check(lambda t: T.sum(T.sigmoid(t)), np.array([0.0])) < 1e-9


def test_fd_conv2d_layer(f64):
    rng = np.random.default_rng(0)
    k = rng.normal(size=(3, 3, 2, 2))
    w = rng.normal(size=(1, 8, 8, 2))
    err = T.finite_difference_check(lambda x: T.sum(conv2d(x, k, 1, "same") * w), rng.normal(size=(1, 8, 8, 2)))
    assert err < 1e-6


def test_fd_step_must_be_positive():
    with pytest.raises(ValueError):
        T.finite_difference_check(lambda x: T.sum(x), np.ones(2), step=0)


# ---------------------------------------------------------------- all ops, many seeds


def _away_from_zero(rng, shape):
    return rng.choice([-1, 1], size=shape) * rng.uniform(0.2, 2.0, size=shape)


def _distinct(rng, shape):
    # values spaced 0.1 apart so max/argmax is stable under small steps
    return (rng.permutation(int(np.prod(shape))) * 0.1 - 1).reshape(shape)


OPS = {
    "add": (lambda x, r: x + r.normal(size=(1, 4)), _away_from_zero),
    "sub": (lambda x, r: r.normal(size=(3, 1)) - x, _away_from_zero),
    "mul": (lambda x, r: x * r.normal(size=(3, 4)) * x, _away_from_zero),
    "div": (lambda x, r: r.normal(size=(3, 4)) / (T.square(x) + 1), _away_from_zero),
    "negate": (lambda x, r: -x, _away_from_zero),
    "relu": (lambda x, r: T.relu(x), _away_from_zero),
    "sigmoid": (lambda x, r: T.sigmoid(x), _away_from_zero),
    "exp": (lambda x, r: T.exp(x), _away_from_zero),
    "log": (lambda x, r: T.log(T.square(x)), _away_from_zero),
    "sqrt": (lambda x, r: T.sqrt(T.square(x) + 1), _away_from_zero),
    "matmul": (lambda x, r: T.matmul(x, r.normal(size=(4, 2))), _away_from_zero),
    "softmax": (lambda x, r: T.softmax(x, axis=1), _away_from_zero),
    "sum": (lambda x, r: T.sum(x * x, axis=0), _away_from_zero),
    "mean": (lambda x, r: T.mean(x * x, axis=1, keepdims=True), _away_from_zero),
    "max": (lambda x, r: T.amax(x, axis=1), _distinct),
    "reshape+transpose": (lambda x, r: T.transpose(T.reshape(x * x, (2, 6))), _away_from_zero),
    "concat": (lambda x, r: T.concat([x, x * x], axis=0), _away_from_zero),
    "take": (lambda x, r: T.take(x * x, [0, 2, 0], axis=0), _away_from_zero),
    "getitem": (lambda x, r: x[1:, ::2] * x[:2, 1::2], _away_from_zero),
    "conv2d": (lambda x, r: conv2d(T.reshape(x, (1, 3, 4, 1)), r.normal(size=(2, 2, 1, 2)), 1, "same"), _away_from_zero),
    "maxpool2d": (lambda x, r: maxpool2d(T.reshape(x, (1, 4, 3, 1)), 2, 1), _distinct),
}


@pytest.mark.parametrize("dtype,step,tol", [(np.float64, 1e-5, 1e-6), (np.float32, 1e-2, 1e-3)], ids=["f64", "f32"])
@pytest.mark.parametrize("op", sorted(OPS))
def test_every_op_matches_finite_differences(op, dtype, step, tol):
    build, sample = OPS[op]
    with T.precision(dtype):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = sample(rng, (3, 4)).astype(dtype)
            consts = np.random.default_rng(100 + seed)
            out_w = None

            def f(t):
                nonlocal out_w
                y = build(t, np.random.default_rng(100 + seed))
                if out_w is None:
                    out_w = consts.normal(size=y.shape)
                return T.sum(y * out_w.astype(dtype))

            err = T.finite_difference_check(f, x, step)
            assert err < tol, f"{op} seed {seed}: {err}"


# ---------------------------------------------------------------- tape invariants


def test_tape_does_not_change_values():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 6, 6, 2)).astype(np.float32)
    k = rng.normal(size=(3, 3, 2, 3)).astype(np.float32)

    def run(xt):
        return T.softmax(T.reshape(maxpool2d(T.relu(conv2d(xt, k, 1, "same"))), (1, -1)))

    plain = run(Tensor(x)).data
    with Tape():
        recorded = run(Tensor(x, requires_grad=True)).data
    assert np.array_equal(plain, recorded)


@settings(deadline=None, max_examples=80)
@given(st.data())
def test_broadcast_matches_explicit_tiling(data):
    rank = data.draw(st.integers(1, 4))
    shape = data.draw(st.lists(st.integers(1, 5), min_size=rank, max_size=rank))
    ones_mask = data.draw(st.lists(st.booleans(), min_size=rank, max_size=rank))
    small = [1 if m else n for n, m in zip(shape, ones_mask)]
    a = data.draw(arrays(np.float64, tuple(shape), elements=st.floats(-10, 10)))
    b = data.draw(arrays(np.float64, tuple(small), elements=st.floats(-10, 10)))
    reps = [n // s for n, s in zip(shape, small)]
    tiled = np.tile(b, reps)
    assert np.array_equal(T.add(a, b).data, T.add(a, tiled).data)
    assert np.array_equal(T.mul(a, b).data, T.mul(a, tiled).data)
    assert np.array_equal(T.add(b, a).data, a + tiled)


def test_precision_switch():
    with T.precision(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32
