"""Graph mechanics of the reverse-mode tensor core."""

import numpy as np
import pytest

from warpseg.autodiff import ActivationMeter, Tensor, as_tensor, is_grad_enabled, no_grad
from warpseg.autodiff import ops


def leaf(data, **kw):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, **kw)


def test_fanout_accumulates():
    x = leaf([3.0])
    y = x + x + x
    y.sum().backward()
    assert np.allclose(x.grad, [3.0])


def test_diamond_graph_single_backward_per_node():
    x = leaf([2.0])
    a = x * 3.0
    b = x * 5.0
    out = (a * b).sum()      # d/dx (15 x^2) = 30 x = 60
    out.backward()
    assert np.allclose(x.grad, [60.0])


def test_grad_owns_memory():
    x = leaf([1.0, 2.0])
    y = (x * 1.0).sum()
    y.backward()
    g_before = x.grad.copy()
    x.grad[...] = 99.0
    z = (x * 1.0).sum()
    x.zero_grad()
    z.backward()
    assert np.allclose(x.grad, g_before)


def test_backward_requires_scalar():
    x = leaf([[1.0, 2.0]])
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_no_grad_blocks_recording():
    x = leaf([1.0])
    assert is_grad_enabled()
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad
    assert y._prev == ()


def test_no_grad_restores_on_exception():
    with pytest.raises(RuntimeError):
        with no_grad():
            raise RuntimeError("boom")
    assert is_grad_enabled()


def test_detach_cuts_graph():
    x = leaf([4.0])
    y = (x * 2.0).detach()
    assert not y.requires_grad
    z = (as_tensor(y) * 3.0).sum()
    assert not z.requires_grad


def test_int_input_promotes_to_float32():
    t = Tensor(np.array([1, 2, 3]))
    assert t.dtype == np.float32


def test_wrapping_tensor_rejected():
    with pytest.raises(TypeError):
        Tensor(Tensor([1.0]))


def test_broadcast_gradient_shapes():
    a = leaf(np.ones((2, 3, 4)))
    b = leaf(np.ones((1, 3, 1)))
    (a * b).sum().backward()
    assert a.grad.shape == (2, 3, 4)
    assert b.grad.shape == (1, 3, 1)
    assert np.allclose(b.grad, 8.0)     # 2*4 elements fold into each


def test_scalar_broadcast_gradient():
    a = leaf(np.ones((3, 3)))
    ((a + 1.0) * 2.0 - 0.5).sum().backward()
    assert np.allclose(a.grad, 2.0)


def test_sum_axis_keepdims_gradients():
    a = leaf(np.arange(12, dtype=np.float64).reshape(3, 4))
    a.sum(axis=0).sum().backward()
    assert np.allclose(a.grad, 1.0)
    a.zero_grad()
    a.mean(axis=1, keepdims=True).sum().backward()
    assert np.allclose(a.grad, 0.25)


def test_reshape_round_trip_gradient():
    a = leaf(np.ones((2, 6)))
    a.reshape(3, 4).sum().backward()
    assert a.grad.shape == (2, 6)
    assert np.allclose(a.grad, 1.0)


def test_division_and_pow():
    a = leaf([2.0])
    b = leaf([4.0])
    (a / b).sum().backward()
    assert np.allclose(a.grad, 0.25)
    assert np.allclose(b.grad, -2.0 / 16.0)
    c = leaf([3.0])
    (c ** 2).sum().backward()
    assert np.allclose(c.grad, 6.0)


def test_rsub_rdiv():
    a = leaf([2.0])
    (10.0 - a).sum().backward()
    assert np.allclose(a.grad, -1.0)
    a.zero_grad()
    (8.0 / a).sum().backward()
    assert np.allclose(a.grad, -2.0)


def test_meter_counts_graph_tensors_only():
    x = leaf(np.ones((4, 4)))
    with ActivationMeter() as m:
        y = x * 2.0            # recorded: 16 float64 = 128 bytes
        _ = Tensor(np.ones((8, 8)))   # leaf: not recorded
        z = y + 1.0            # recorded
        _ = z.sum()            # recorded scalar
    assert m.tensors == 3
    assert m.bytes == 128 + 128 + 8


def test_meter_ignores_no_grad_and_gradless():
    with ActivationMeter() as m:
        plain = Tensor(np.ones(4))
        _ = plain * 2.0        # parents don't require grad: nothing recorded
        x = leaf(np.ones(4))
        with no_grad():
            _ = x * 2.0
    assert m.tensors == 0
    assert m.bytes == 0


def test_meters_nest():
    x = leaf(np.ones(2))
    with ActivationMeter() as outer:
        _ = x * 1.0
        with ActivationMeter() as inner:
            _ = x * 2.0
    assert inner.tensors == 1
    assert outer.tensors == 2


def test_relu_kink_convention_zero():
    # subgradient at exactly zero is taken as 0
    x = leaf([-1.0, 0.0, 2.0])
    ops.relu(x).sum().backward()
    assert np.allclose(x.grad, [0.0, 0.0, 1.0])


def test_clip_gradient_mask():
    x = leaf([-2.0, 0.3, 2.0])
    ops.clip(x, -1.0, 1.0).sum().backward()
    assert np.allclose(x.grad, [0.0, 1.0, 0.0])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = leaf(rng.standard_normal((2, 5, 3, 3)))
    p = ops.softmax_channels(x)
    assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-12)


def test_maximum_tie_splits_evenly():
    a = leaf([1.0])
    b = leaf([1.0])
    ops.maximum(a, b).sum().backward()
    assert np.allclose(a.grad + b.grad, 1.0)
