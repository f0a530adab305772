"""Layer math, parameter registration, and the counting machinery."""

import numpy as np
import pytest

from dialstm import tensor as T
from dialstm.errors import ConfigError
from dialstm.layers import (BatchNorm, Conv2d, ElementwiseAffine,
                            FullyConnected, GroupedLinear, count_weights,
                            enumerate_learnable)
from dialstm.tensor import Tensor


@pytest.mark.parametrize("make,weights,affine", [
    (lambda r: FullyConnected(7, 5, bias=True, rng=r), 35, 5),
    (lambda r: FullyConnected(7, 5, bias=False, rng=r), 35, 0),
    (lambda r: GroupedLinear(8, 2, bias=True, rng=r), 32, 8),
    (lambda r: GroupedLinear(8, 4, bias=False, rng=r), 16, 0),
    (lambda r: ElementwiseAffine(6), 12, 0),
    (lambda r: Conv2d(3, 4, 3, rng=r), 108, 0),
    (lambda r: Conv2d(3, 4, 1, bias=True, rng=r), 12, 4),
    (lambda r: BatchNorm(9), 0, 18),
])
def test_counts_match_closed_forms_and_enumeration(make, weights, affine, rng):
    layer = make(rng)
    assert layer.weight_count() == weights
    assert layer.affine_count() == affine
    assert layer.learnable_count() == enumerate_learnable([layer])


def test_grouped_linear_divisibility():
    with pytest.raises(ConfigError, match="divide"):
        GroupedLinear(8, 3)


def test_fully_connected_applies_bias(rng):
    fc = FullyConnected(3, 2, rng=rng)
    fc.weight.data[:] = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    fc.bias.data[:] = np.array([10.0, 20.0])
    out = fc(Tensor([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(out.data, [[14.0, 25.0]])
    flat = fc(Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(flat.data, [14.0, 25.0])


def test_grouped_linear_dense_equivalence(rng):
    gl = GroupedLinear(6, 3, bias=False, rng=rng)
    x = rng.standard_normal((4, 6))
    np.testing.assert_allclose(gl(Tensor(x)).data, x @ gl.as_dense_matrix(),
                               atol=1e-12)


def test_initialization_pins(rng):
    conv = Conv2d(4, 8, 3, rng=rng)
    bound = 1.0 / np.sqrt(4 * 9)
    assert np.abs(conv.weight.data).max() <= bound
    fc = FullyConnected(10, 3, rng=rng)
    assert np.abs(fc.weight.data).max() <= 1.0 / np.sqrt(10)
    assert np.all(fc.bias.data == 0.0)
    bn = BatchNorm(5)
    assert np.all(bn.gamma.data == 1.0) and np.all(bn.beta.data == 0.0)
    assert np.all(bn.running_mean == 0.0) and np.all(bn.running_var == 1.0)


def test_batch_norm_running_stats_momentum(rng):
    bn = BatchNorm(2, momentum=0.9)
    x = rng.standard_normal((16, 2, 3, 3)) * 2.0 + 1.0
    bn(Tensor(x), training=True)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)),
                               atol=1e-12)
    np.testing.assert_allclose(bn.running_var,
                               0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-12)


def test_shared_layer_counted_once(rng):
    shared = FullyConnected(4, 4, rng=rng)
    other = FullyConnected(4, 2, rng=rng)
    budget = count_weights({"a": [shared, shared], "b": [shared, other]})
    assert budget.weights("a") == 16
    assert budget.weights("b") == 8
    assert budget.weights_total == 24
    assert budget.learnable_total == enumerate_learnable([shared, other])


def test_budget_table_format(rng):
    budget = count_weights({"backbone": [Conv2d(3, 4, 3, rng=rng)],
                            "attention": [ElementwiseAffine(4)]})
    table = budget.format_table()
    assert "backbone" in table and "attention" in table and "TOTAL" in table
    assert str(budget.learnable_total) in table
