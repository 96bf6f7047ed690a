import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import grad_suite
import oracle_suite
from sfs import tensor as T
from sfs.tensor import Tensor


@pytest.mark.parametrize("name", sorted(grad_suite.CASES))
@pytest.mark.parametrize("seed", [0, 7])
def test_gradients(name, seed):
    assert grad_suite.run_case(name, seed) < 1e-3


@pytest.mark.parametrize("name", ["conv2d", "correlation", "locally_connected"])
def test_structured_op_oracles(name):
    err, tol = oracle_suite.CHECKS[name]()
    assert err < tol


def test_tape_single_use():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.tsum(x * x)
        tape.backward(y)
    with pytest.raises(T.TapeError):
        tape.backward(y)


def test_tape_reverse_order_chain():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with T.Tape() as tape:
        y = x * x      # 4
        z = y * x      # 8, dz/dx = 3x^2 = 12
        tape.backward(z)
    assert np.allclose(x.grad, 12.0)


def test_conv_output_extent():
    # extent formula drives every conv shape
    assert T.conv_output_extent(7, 3, 1, 2, 2) == (3, 5)
    assert T.conv_output_extent(64, 3, 1, 1, 1) == (64, 3)
    y = T.conv2d(Tensor(np.zeros((1, 7, 7))), Tensor(np.zeros((4, 1, 3, 3))),
                 T.LayerConfig(stride=2, dilation=2, padding=1))
    assert y.shape == (4, 3, 3)


def test_conv_rejects_bad_channels():
    with pytest.raises(T.DimensionError):
        T.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))),
                 T.LayerConfig())


def test_softmax_rows_sum_to_one():
    r = np.random.default_rng(0)
    x = Tensor(r.standard_normal((4, 6)) * 30)
    s = T.softmax(x, axis=0).data
    assert np.allclose(s.sum(axis=0), 1.0)
    assert (s > 0).all()


def test_softmax_shift_invariance():
    r = np.random.default_rng(1)
    x = r.standard_normal((3, 5))
    a = T.softmax(Tensor(x), axis=0).data
    b = T.softmax(Tensor(x + 100.0), axis=0).data
    assert np.allclose(a, b)


def test_avg_pool_unpool_inverse_on_constant_blocks():
    r = np.random.default_rng(2)
    coarse = r.random((2, 3, 3))
    up = T.avg_unpool2d(Tensor(coarse), 2).data
    down = T.avg_pool2d(Tensor(up), 2).data
    assert np.allclose(down, coarse)


def test_bilinear_warp_zero_flow_is_identity():
    r = np.random.default_rng(3)
    img = r.random((2, 6, 6))
    out = T.bilinear_warp(Tensor(img), Tensor(np.zeros((2, 6, 6)))).data
    assert np.array_equal(out, img)


def test_bilinear_warp_integer_shift():
    img = np.arange(25, dtype=float).reshape(1, 5, 5)
    flow = np.zeros((2, 5, 5))
    flow[0] = 1.0  # sample one column to the right
    out = T.bilinear_warp(Tensor(img), Tensor(flow)).data
    assert np.array_equal(out[0, :, :4], img[0, :, 1:])


def test_clamp_passes_gradient_inside_window_only():
    x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    with T.Tape() as tape:
        y = T.tsum(T.clamp(x, -1.0, 1.0))
        tape.backward(y)
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_adam_step_rejects_nonfinite_gradient():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    g = {"w": np.array([np.nan, 0.0])}
    with pytest.raises(T.TrainingError, match="w"):
        T.adam_step(p, g, T.AdamState())


def test_adam_descends_quadratic():
    p = {"w": Tensor(np.array([5.0]), requires_grad=True)}
    st_ = T.AdamState()
    for _ in range(400):
        T.adam_step(p, {"w": 2 * p["w"].data}, st_, lr=0.05)
    assert abs(p["w"].data[0]) < 1e-2


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_mul_gradient_is_other_operand(seed):
    r = np.random.default_rng(seed)
    a_data = r.standard_normal(4)
    b_data = r.standard_normal(4)
    a = Tensor(a_data, requires_grad=True)
    b = Tensor(b_data, requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.tsum(a * b))
    assert np.allclose(a.grad, b_data)
    assert np.allclose(b.grad, a_data)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_unbroadcast_accumulates_sum(seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.standard_normal((3, 4)), requires_grad=True)
    bias = Tensor(r.standard_normal((1, 4)), requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.tsum(a + bias))
    assert np.allclose(bias.grad, np.full((1, 4), 3.0))


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_correlation_zero_displacement_channel(seed):
    # center channel equals the channel-mean dot of co-located features
    r = np.random.default_rng(seed)
    a = r.standard_normal((3, 4, 4))
    b = r.standard_normal((3, 4, 4))
    vol = T.correlation_volume(Tensor(a), Tensor(b), 1).data
    assert np.allclose(vol[4], (a * b).mean(axis=0))


def test_batch_norm_normalizes_in_training():
    r = np.random.default_rng(5)
    x = Tensor(r.standard_normal((8, 3, 4, 4)) * 3 + 2)
    running = {"mean": np.zeros(3), "var": np.ones(3)}
    y = T.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), running,
                     training=True).data
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_grad_check_rejects_nonscalar():
    with pytest.raises(T.ConfigurationError):
        T.grad_check(lambda x: x, Tensor(np.zeros(3)))
