"""Reverse-mode differentiation against the central-difference oracle."""

import numpy as np
import pytest

from dialstm import tensor as T
from dialstm.errors import GraphError, NumericOverflowError
from dialstm.tensor import Tensor, backward, finite_difference_grad, no_grad


def test_square_sum_gradient():
    w = Tensor([3.0], requires_grad=True)
    backward(T.sum_all(T.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [6.0])


def test_sigmoid_gradient_at_zero():
    x = Tensor([0.0], requires_grad=True)
    backward(T.sum_all(T.sigmoid(x)))
    np.testing.assert_allclose(x.grad, [0.25], atol=1e-15)


def test_fanout_accumulates_sum_of_single_use_gradients(rng):
    x0 = rng.standard_normal(4)
    y = Tensor(rng.standard_normal(4))

    x = Tensor(x0.copy(), requires_grad=True)
    backward(T.sum_all(T.add(T.mul(x, y), T.mul(x, x))))
    combined = x.grad.copy()

    xa = Tensor(x0.copy(), requires_grad=True)
    backward(T.sum_all(T.mul(xa, y)))
    xb = Tensor(x0.copy(), requires_grad=True)
    backward(T.sum_all(T.mul(xb, xb)))
    np.testing.assert_allclose(combined, xa.grad + xb.grad, atol=1e-15)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, x)
    with pytest.raises(GraphError, match="scalar"):
        backward(y)
    T.active_graph().clear()


def test_backward_twice_errors():
    x = Tensor([2.0], requires_grad=True)
    loss = T.sum_all(T.mul(x, x))
    backward(loss)
    with pytest.raises(GraphError, match="empty graph"):
        backward(loss)


def test_no_grad_suppresses_recording():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad
    assert len(T.active_graph()) == 0


def test_determinism_bitwise(rng):
    x0 = rng.standard_normal((3, 4))
    w0 = rng.standard_normal((4, 2))

    def run():
        x = Tensor(x0.copy(), requires_grad=True)
        w = Tensor(w0.copy(), requires_grad=True)
        out = T.relu(T.matmul(x, w))
        loss = T.softmax_cross_entropy(out, np.array([0, 1, 0]))
        backward(loss)
        return out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def test_fd_identity_sum_is_ones(rng):
    x = Tensor(rng.standard_normal(5))
    grad = finite_difference_grad(lambda t: T.sum_all(t), x)
    np.testing.assert_allclose(grad.data, np.ones(5), atol=1e-9)


def test_fd_quadratic_is_exact_to_truncation():
    x = Tensor([1.0, 2.0])
    grad = finite_difference_grad(
        lambda t: 0.5 * float((t.data ** 2).sum()), x)
    np.testing.assert_allclose(grad.data, [1.0, 2.0], atol=1e-8)


def test_fd_nonfinite_names_coordinate():
    x = Tensor([1.0, 2.0])

    def f(t):
        # finite only while coordinate 1 keeps its base value
        return 0.0 if t.data[1] == 2.0 else float("inf")

    with pytest.raises(NumericOverflowError, match="coordinate 1"):
        finite_difference_grad(f, x)


# one trial per (opcode, shape, seed) draw; 50 of them cover the op set
_OP_TRIALS = []
for trial in range(50):
    _OP_TRIALS.append(trial)


def _random_op_case(trial: int):
    rng = np.random.default_rng([5, trial])
    ops = ["add", "mul", "matmul", "conv2d", "relu", "sigmoid", "tanh",
           "global_avg_pool", "channelwise_mul", "batch_norm",
           "grouped_linear", "elementwise_affine", "softmax_cross_entropy",
           "concat", "slice"]
    return rng, ops[trial % len(ops)]


@pytest.mark.parametrize("trial", _OP_TRIALS)
def test_every_op_matches_central_differences(trial):
    rng, op = _random_op_case(trial)

    def rand(*shape):
        return rng.standard_normal(shape)

    if op == "add" or op == "mul":
        a = Tensor(rand(3, 4), requires_grad=True)
        b = Tensor(rand(4), requires_grad=True)
        fn = lambda: T.sum_all(getattr(T, op)(a, T.tanh(b)))  # noqa: E731
        params = [a, b]
    elif op == "matmul":
        a = Tensor(rand(3, 4), requires_grad=True)
        b = Tensor(rand(4, 2), requires_grad=True)
        fn = lambda: T.sum_all(T.tanh(T.matmul(a, b)))  # noqa: E731
        params = [a, b]
    elif op == "conv2d":
        stride = 1 + trial % 2
        x = Tensor(rand(2, 2, 5, 5), requires_grad=True)
        w = Tensor(rand(3, 2, 3, 3) * 0.5, requires_grad=True)
        bias = Tensor(rand(3), requires_grad=True)
        fn = lambda: T.sum_all(T.tanh(T.conv2d(x, w, bias, stride=stride,  # noqa: E731
                                               padding=1)))
        params = [x, w, bias]
    elif op in ("relu", "sigmoid", "tanh"):
        x = Tensor(rand(4, 3) + 0.1, requires_grad=True)  # keep off relu's kink
        fn = lambda: T.sum_all(getattr(T, op)(x))  # noqa: E731
        params = [x]
    elif op == "global_avg_pool":
        x = Tensor(rand(2, 3, 4, 4), requires_grad=True)
        fn = lambda: T.sum_all(T.tanh(T.global_avg_pool(x)))  # noqa: E731
        params = [x]
    elif op == "channelwise_mul":
        x = Tensor(rand(2, 3, 3, 3), requires_grad=True)
        v = Tensor(rand(2, 3), requires_grad=True)
        fn = lambda: T.sum_all(T.channelwise_mul(x, T.sigmoid(v)))  # noqa: E731
        params = [x, v]
    elif op == "batch_norm":
        x = Tensor(rand(4, 2, 3, 3), requires_grad=True)
        gamma = Tensor(1.0 + 0.1 * rand(2), requires_grad=True)
        beta = Tensor(rand(2), requires_grad=True)

        def fn():
            rm, rv = np.zeros(2), np.ones(2)
            return T.sum_all(T.tanh(T.batch_norm(x, gamma, beta, rm, rv,
                                                 training=True)))
        params = [x, gamma, beta]
    elif op == "grouped_linear":
        x = Tensor(rand(3, 6), requires_grad=True)
        w = Tensor(rand(2, 3, 3), requires_grad=True)
        fn = lambda: T.sum_all(T.tanh(T.grouped_linear(x, w)))  # noqa: E731
        params = [x, w]
    elif op == "elementwise_affine":
        x = Tensor(rand(4, 5), requires_grad=True)
        w = Tensor(rand(5), requires_grad=True)
        b = Tensor(rand(5), requires_grad=True)
        fn = lambda: T.sum_all(T.sigmoid(T.elementwise_affine(x, w, b)))  # noqa: E731
        params = [x, w, b]
    elif op == "softmax_cross_entropy":
        x = Tensor(rand(4, 3), requires_grad=True)
        labels = np.random.default_rng([6, trial]).integers(0, 3, size=4)
        fn = lambda: T.softmax_cross_entropy(x, labels)  # noqa: E731
        params = [x]
    elif op == "concat":
        a = Tensor(rand(2, 3), requires_grad=True)
        b = Tensor(rand(2, 2), requires_grad=True)
        fn = lambda: T.sum_all(T.tanh(T.concat([a, b], axis=1)))  # noqa: E731
        params = [a, b]
    else:  # slice
        x = Tensor(rand(3, 6), requires_grad=True)
        fn = lambda: T.sum_all(T.tanh(T.slice_along(x, 1, 1, 5)))  # noqa: E731
        params = [x]

    for p in params:
        p.grad = None
    backward(fn())
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_difference_grad(lambda _t: fn(), p)
        err = np.abs(analytic - numeric.data)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric.data)), 1e-6)
        assert (err / scale).max() <= 1e-4, f"{op}: rel err {(err / scale).max()}"
