import zlib

import numpy as np
import pytest

from glare import tensor as T
from glare.tensor import Tensor, TensorError, gradcheck, precision

N_INSTANCES = 20
TOL = 1e-3


def _t(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _weighted(out: Tensor, rng_seed: int) -> Tensor:
    # a fixed random projection makes every output element matter
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return T.sum(out * Tensor(w))


# Each case builds (inputs, fn) from an rng; fn returns the raw op output.
def _unary(op, lo=-1.5, hi=1.5):
    def build(rng):
        x = _t(rng, (2, 3, 4), lo, hi)
        return [x], lambda: op(x)

    return build


def _binary(op, shape_b=(2, 3, 4), lo=-1.5, hi=1.5):
    def build(rng):
        a = _t(rng, (2, 3, 4), lo, hi)
        b = _t(rng, shape_b, lo, hi)
        return [a, b], lambda: op(a, b)

    return build


def _div(rng):
    a = _t(rng, (2, 3, 4))
    b = Tensor(rng.uniform(0.5, 2.0, (2, 3, 4)) * rng.choice([-1, 1], (2, 3, 4)), requires_grad=True)
    return [a, b], lambda: T.div(a, b)


def _clamp(rng):
    x = _t(rng, (3, 5), -2, 2)
    # keep values away from the kinks
    x.data[np.abs(np.abs(x.data) - 1.0) < 0.05] += 0.2
    return [x], lambda: T.clamp(x, -1.0, 1.0)


def _abs(rng):
    x = _t(rng, (3, 5))
    x.data[np.abs(x.data) < 0.05] = 0.3
    return [x], lambda: T.abs(x)


def _leaky(rng):
    x = _t(rng, (3, 5))
    x.data[np.abs(x.data) < 0.05] = 0.3
    return [x], lambda: T.leaky_relu(x, 0.2)


def _matmul(rng):
    a = _t(rng, (2, 3, 4))
    b = _t(rng, (2, 4, 5))
    return [a, b], lambda: T.matmul(a, b)


def _logabsdet(rng):
    m = Tensor(np.eye(3) * 2 + rng.normal(0, 0.3, (3, 3)), requires_grad=True)
    return [m], lambda: T.logabsdet(m)


def _conv(stride, pad, mode="zeros", size=7):
    def build(rng):
        x = _t(rng, (2, 3, size, size))
        w = _t(rng, (4, 3, 3, 3))
        b = _t(rng, (4,))
        return [x, w, b], lambda: T.conv2d(x, w, b, stride=stride, pad=pad, pad_mode=mode)

    return build


def _resample(mode):
    def build(rng):
        x = _t(rng, (2, 3, 4, 6))
        return [x], lambda: T.resample(x, mode)

    return build


def _bilinear(rng):
    x = _t(rng, (2, 3, 5, 6))
    # keep sample points away from integer grid lines, where the map has kinks
    rows = rng.integers(0, 4, (2, 1, 4, 4)) + rng.uniform(0.1, 0.9, (2, 1, 4, 4))
    cols = rng.integers(0, 5, (2, 1, 4, 4)) + rng.uniform(0.1, 0.9, (2, 1, 4, 4))
    c = Tensor(np.concatenate([rows, cols], axis=1), requires_grad=True)
    return [x, c], lambda: T.bilinear_sample(x, c)


def _reduce(kind, axes):
    def build(rng):
        x = _t(rng, (2, 3, 4))
        return [x], lambda: T.reduce(kind, x, axes=axes)

    return build


def _reshape_transpose(rng):
    x = _t(rng, (2, 3, 4))
    return [x], lambda: T.transpose(T.reshape(x, (6, 4)), (1, 0))


def _concat(rng):
    a, b = _t(rng, (2, 3, 4)), _t(rng, (2, 2, 4))
    return [a, b], lambda: T.concat([a, b], axis=1)


def _getitem(rng):
    x = _t(rng, (3, 4, 5))
    return [x], lambda: x[:, 1:3, ::2]


def _take_rows(rng):
    table = _t(rng, (6, 3))
    idx = rng.integers(0, 6, 10)
    return [table], lambda: T.take_rows(table, idx)


def _softmax(rng):
    x = _t(rng, (3, 5), -2, 2)
    return [x], lambda: T.softmax(x, axis=-1)


def _power(rng):
    x = _t(rng, (3, 4), 0.2, 2.0)
    return [x], lambda: T.power(x, 0.7)


CASES = {
    "add": _binary(T.add),
    "add_channel_broadcast": _binary(T.add, (2, 1, 1)),
    "add_scalar_broadcast": _binary(T.add, (1,)),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "mul_channel_broadcast": _binary(T.mul, (2, 1, 1)),
    "div": _div,
    "neg": _unary(T.neg),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.2, 2.0),
    "tanh": _unary(T.tanh),
    "sigmoid": _unary(T.sigmoid, -4, 4),
    "abs": _abs,
    "square": _unary(T.square),
    "clamp": _clamp,
    "power": _power,
    "softplus": _unary(T.softplus, -4, 4),
    "silu": _unary(T.silu),
    "leaky_relu": _leaky,
    "matmul": _matmul,
    "logabsdet": _logabsdet,
    "conv2d": _conv(1, 1),
    "conv2d_stride2": _conv(2, 1),
    "conv2d_replicate": _conv(1, 1, "replicate", 6),
    "conv2d_nopad": _conv(1, 0, size=5),
    "nearest_up2": _resample("nearest_up2"),
    "avg_down2": _resample("avg_down2"),
    "bilinear_sample": _bilinear,
    "sum_all": _reduce("sum", None),
    "mean_axes": _reduce("mean", (0, 2)),
    "reshape_transpose": _reshape_transpose,
    "concat": _concat,
    "getitem": _getitem,
    "take_rows": _take_rows,
    "softmax": _softmax,
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_finite_difference_gradients(name):
    build = CASES[name]
    worst = 0.0
    with precision(np.float64):
        for i in range(N_INSTANCES):
            rng = np.random.default_rng([zlib.crc32(name.encode()), i])
            inputs, op = build(rng)
            worst = max(worst, gradcheck(lambda: _weighted(op(), i), inputs, eps=1e-4))
    assert worst < TOL, f"{name}: relative error {worst:.2e}"


def test_gradient_accumulates_over_reuse():
    with precision(np.float64):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = x * x + x * 3.0
        T.sum(y).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_deep_graph_does_not_recurse():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    T.sum(y).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


@pytest.mark.parametrize(
    "make",
    [
        lambda: T.log(Tensor(np.array([0.0, 1.0]))),
        lambda: T.div(Tensor(np.ones(2)), Tensor(np.array([1.0, 0.0]))),
        lambda: T.exp(Tensor(np.array([1e4]))),
        lambda: T.add(Tensor(np.array([np.nan])), Tensor(np.array([1.0]))),
    ],
)
def test_nonfinite_results_raise(make):
    with pytest.raises(TensorError):
        make()


def test_shape_rules():
    with pytest.raises(TensorError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(TensorError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(TensorError):
        # stride 2, k 3, pad 1 on an even extent has a non-integral output size
        T.conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)


def test_default_and_wide_precision():
    assert Tensor(np.ones(2)).dtype == np.float32
    with precision(np.float64):
        assert Tensor(np.ones(2)).dtype == np.float64
    assert Tensor(np.ones(2)).dtype == np.float32
