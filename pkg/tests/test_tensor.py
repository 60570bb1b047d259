"""Engine-level behavior: graph construction, backward, accumulation."""

import numpy as np
import pytest

from crowdflow.tensorcore import (
    Tensor, add, backward, mul, parameter_grads, scale, sum_all,
    topological_order,
)


def test_rejects_non_4d_data():
    with pytest.raises(ValueError, match="4-D"):
        Tensor(np.zeros((3, 3)))


def test_scalar_item_and_shape():
    t = Tensor(np.full((1, 1, 1, 1), 2.5))
    assert t.item() == 2.5
    assert t.shape == (1, 1, 1, 1)


def test_backward_rejects_non_scalar(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    y = mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        backward(y)


def test_diamond_graph_accumulates(rng):
    # y = sum(x*x + x); dy/dx = 2x + 1
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    loss = sum_all(add(mul(x, x), x))
    backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0, atol=1e-12)


def test_reused_node_contributes_twice(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    y = scale(x, 3.0)
    loss = sum_all(add(y, y))
    backward(loss)
    np.testing.assert_allclose(x.grad, np.full_like(x.data, 6.0))


def test_constant_subgraphs_are_pruned(rng):
    a = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=False)
    b = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=False)
    out = mul(a, b)
    assert not out.requires_grad
    assert out._parents == ()


def test_topological_order_parents_first(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    y = mul(x, x)
    z = sum_all(y)
    order = topological_order(z)
    assert order.index(x) < order.index(y) < order.index(z)


def test_untouched_parameters_get_zero_grad(rng):
    used = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    unused = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    backward(sum_all(mul(used, used)))
    grads = parameter_grads({"used": used, "unused": unused})
    assert np.any(grads["used"] != 0.0)
    np.testing.assert_array_equal(grads["unused"], np.zeros_like(unused.data))


def test_grad_accumulates_across_backward_calls(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    for _ in range(2):
        backward(sum_all(x))
    np.testing.assert_allclose(x.grad, np.full_like(x.data, 2.0))
