import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gprsim import autodiff as ad
from helpers import gradcheck, op_cases


@pytest.mark.parametrize("name, build", op_cases(), ids=[n for n, _ in op_cases()])
def test_operation_gradients(name, build):
    for seed in range(5):
        fn, arrays = build(np.random.default_rng(seed))
        assert gradcheck(fn, arrays, seed=seed) <= 1e-4


def test_broadcast_gradient_shapes():
    a = ad.Tensor(np.ones((3, 4)), requires_grad=True)
    b = ad.Tensor(np.ones((1, 4)), requires_grad=True)
    c = ad.Tensor(2.0, requires_grad=True)
    ((a * b + c) ** 2).sum().backward()
    assert a.grad.shape == (3, 4) and b.grad.shape == (1, 4) and c.grad.shape == ()
    assert c.grad == pytest.approx(2 * 3.0 * 12)


def test_shared_node_accumulates():
    x = ad.Tensor(3.0, requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad == 7.0


def test_no_grad_records_nothing():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad and y._parents == ()


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        (ad.Tensor([1.0, 2.0], requires_grad=True) * 2).backward()


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-100, 100))
def test_softmax_shift_invariant(vals, c):
    x = np.array(vals)
    a = ad.softmax(ad.Tensor(x)).data
    b = ad.softmax(ad.Tensor(x + c)).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    assert a.sum() == pytest.approx(1.0)
