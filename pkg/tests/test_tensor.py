"""Autograd core: tape mechanics, allocation tracking, primitive gradients."""

import gc

import numpy as np
import pytest

from eaanet.errors import ContractError, ShapeMismatchError
from eaanet.tensor import (Tensor, backward, concat, matmul, no_grad, tape,
                           tracker_current, tracker_peak, tracker_reset,
                           transpose)


@pytest.fixture(autouse=True)
def _clean_tape():
    tape().clear()
    yield
    tape().clear()


def test_tensor_wraps_array_as_float32():
    t = Tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32
    assert t.shape == (2, 2)


def test_scalar_chain_gradients():
    x = Tensor(3.0, requires_grad=True)
    y = x * x + 2.0 * x + 1.0
    backward(y)
    assert np.isclose(x.grad, 8.0)  # 2x + 2 at x=3


def test_broadcast_add_unbroadcasts_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    backward((a + b).sum())
    assert a.grad.shape == (2, 3) and (a.grad == 1).all()
    assert b.grad.shape == (3,) and (b.grad == 2).all()


def test_mean_over_axis_tuple():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
    backward(x.mean(axis=(1, 2)).sum())
    assert np.allclose(x.grad, 1.0 / 12.0)


def test_matmul_forward_oracle():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_batch_broadcast_gradient():
    a = Tensor(np.random.default_rng(0).standard_normal((4, 2, 3)),
               requires_grad=True)
    b = Tensor(np.random.default_rng(1).standard_normal((3, 5)),
               requires_grad=True)
    backward(matmul(a, b).sum())
    assert a.grad.shape == a.shape
    assert b.grad.shape == b.shape
    # db = sum over batch of a^T @ ones
    expect = np.einsum("nij,nik->jk", a.data, np.ones((4, 2, 5)))
    assert np.allclose(b.grad, expect)


def test_concat_splits_gradient():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 3)), requires_grad=True)
    out = concat([a, b], axis=1)
    assert out.shape == (2, 5)
    backward((out * 2.0).sum())
    assert (a.grad == 2).all() and b.grad.shape == (2, 3)


def test_transpose_roundtrip_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(transpose(x, (1, 0)).sum())
    assert (x.grad == 1).all()


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_no_grad_skips_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    before = len(tape())
    with no_grad():
        y = x * 2.0
    assert len(tape()) == before
    assert not y.requires_grad


def test_backward_consumes_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    backward((x * 2.0).sum())
    assert len(tape()) == 0


def test_gradient_accumulates_across_uses():
    x = Tensor(2.0, requires_grad=True)
    y = x * 3.0 + x * 4.0
    backward(y)
    assert np.isclose(x.grad, 7.0)


class TestAllocTracker:
    def test_alloc_and_free_balance(self):
        gc.collect()
        base = tracker_current()
        t = Tensor(np.zeros((256, 256), dtype=np.float32))
        assert tracker_current() == base + 256 * 256 * 4
        del t
        gc.collect()
        assert tracker_current() == base

    def test_views_cost_nothing(self):
        gc.collect()
        t = Tensor(np.zeros((64, 64), dtype=np.float32))
        base = tracker_current()
        v = Tensor(t.data[::2])
        assert tracker_current() == base
        del v, t
        gc.collect()

    def test_grad_buffer_is_charged_and_freed(self):
        gc.collect()
        t = Tensor(np.zeros((64, 64), dtype=np.float32), requires_grad=True)
        base = tracker_current()
        t._ensure_grad()
        assert tracker_current() == base + 64 * 64 * 4
        t.zero_grad(free=True)
        assert tracker_current() == base

    def test_peak_is_high_water_mark(self):
        gc.collect()
        tracker_reset()
        start = tracker_peak()
        t = Tensor(np.zeros(1 << 16, dtype=np.float32))
        del t
        gc.collect()
        assert tracker_peak() >= start + (1 << 18)
        assert tracker_current() < tracker_peak()

    def test_backward_releases_intermediates(self):
        """Live bytes return to (params + grads) after the sweep."""
        gc.collect()
        tracker_reset()
        x = Tensor(np.zeros((128, 128), dtype=np.float32), requires_grad=True)
        base = tracker_current()
        loss = (((x * 2.0) + 1.0) * (x + 3.0)).sum()
        mid = tracker_current()
        assert mid > base
        backward(loss)
        del loss
        gc.collect()
        # only x and x.grad should remain beyond base
        assert tracker_current() == base + x.grad.nbytes
