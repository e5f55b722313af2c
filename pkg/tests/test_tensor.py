import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adapter import ndcore as nd
from adapter.errors import ContractError, ShapeError
from adapter.ndcore.tensor import Tensor, unbroadcast

from conftest import central_diff, rel_err


def matmul_loops(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_default_dtype_is_float32_and_precision_switches():
    assert nd.get_default_dtype() == np.float32
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with nd.precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert nd.get_default_dtype() == np.float32


def test_matmul_matches_triple_loop(f64, rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    out = (Tensor(a) @ Tensor(b)).data
    np.testing.assert_allclose(out, matmul_loops(a, b), rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


def test_matmul_batched_gradient(f64, rng):
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = rng.normal(size=(2, 3, 2))
    ((a @ b) * w).sum().backward()

    def f():
        return float(((a.data @ b.data) * w).sum())

    assert rel_err(a.grad, central_diff(f, a.data)) < 1e-7
    assert rel_err(b.grad, central_diff(f, b.data)) < 1e-7


@pytest.mark.parametrize("op", [
    lambda x, y: x + y, lambda x, y: x - y, lambda x, y: x * y, lambda x, y: x / (y * y + 1.0),
    lambda x, y: nd.exp(x * 0.3) * y, lambda x, y: nd.log(x * x + 1.0) - y, lambda x, y: (x ** 3) * y,
])
def test_elementwise_gradients_with_broadcasting(f64, rng, op):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(4,)), requires_grad=True)
    w = rng.normal(size=(3, 4))
    (op(x, y) * w).sum().backward()

    def f():
        return float(((op(Tensor(x.data), Tensor(y.data))).data * w).sum())

    assert rel_err(x.grad, central_diff(f, x.data)) < 1e-6
    assert rel_err(y.grad, central_diff(f, y.data)) < 1e-6


def test_shape_ops_gradients(f64, rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = rng.normal(size=(4, 3, 2))
    out = x.transpose(2, 1, 0) * w + x.reshape(4, 3, 2) + x.swapaxes(0, 2)
    out.mean().backward()

    def f():
        d = x.data
        return float((d.transpose(2, 1, 0) * w + d.reshape(4, 3, 2) + np.swapaxes(d, 0, 2)).mean())

    assert rel_err(x.grad, central_diff(f, x.data)) < 1e-7


def test_getitem_repeated_index_accumulates():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 0, 1, 0])


def test_concat_and_stack_route_gradients(f64, rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    w = rng.normal(size=(3, 3))
    (nd.concat([a, b], axis=0) * w).sum().backward()
    np.testing.assert_allclose(a.grad, w[:2])
    np.testing.assert_allclose(b.grad, w[2:])
    a.grad = None
    c = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    (nd.stack([a, c], axis=1) * 2.0).sum().backward()
    np.testing.assert_allclose(a.grad, 2.0)
    np.testing.assert_allclose(c.grad, 2.0)


def test_gradients_accumulate_until_cleared():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_is_summed_once_per_use():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_contracts():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()
    with pytest.raises(ContractError):
        Tensor([1.0]).sum().backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with nd.no_grad():
        y = x * 2.0
        assert not nd.is_grad_enabled()
    assert nd.is_grad_enabled()
    assert not y.requires_grad and y.is_leaf


def test_tape_order_is_topological():
    x = Tensor([1.0], requires_grad=True)
    a = x * 2.0
    b = a + x
    c = b * a
    order = nd.tape_order(c)
    pos = {id(t): i for i, t in enumerate(order)}
    for node in order:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]
    assert order[-1] is c


def test_flop_counter_counts_matmul():
    with nd.count_flops() as counter:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 5)))
    assert counter.total == 2 * 2 * 3 * 5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=0, max_size=3), st.integers(0, 2), st.integers(0, 2**16))
def test_unbroadcast_restores_shape_and_total(target, extra_lead, seed):
    target = tuple(target)
    expanded = tuple(3 if n == 1 else n for n in target)
    g = np.random.default_rng(seed).normal(size=(2,) * extra_lead + expanded)
    reduced = unbroadcast(g, target)
    assert reduced.shape == target
    assert reduced.sum() == pytest.approx(g.sum())


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-5, 5)))
def test_sum_gradient_is_ones(x):
    t = Tensor(x, requires_grad=True, dtype=np.float64)
    t.sum().backward()
    np.testing.assert_array_equal(t.grad, np.ones_like(x))
