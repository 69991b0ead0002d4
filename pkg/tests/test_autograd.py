import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from c2datt.autograd import (AdamState, Tensor, adam_step, batch_norm_2d, broadcast_mul, conv2d,
                             grad_check, instance_norm_freq, linear, no_grad, precision,
                             reduce_moments, relu, sigmoid, softmax, tanh)
from c2datt.autograd import functional as F

from oracles import conv2d_loop


# -- conv2d ---------------------------------------------------------------

def test_conv2d_all_ones_counts_neighbours():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    expected = conv2d_loop(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), padding=1)[0, 0]
    np.testing.assert_array_equal(expected, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])
    np.testing.assert_allclose(out, expected)


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 4))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_allclose(out.data, x.astype(np.float32))


def test_conv2d_stride_size():
    out = conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 1, 2, 2)


@pytest.mark.parametrize("stride,padding,bias", [(1, 1, False), (2, 1, True), (1, 0, True), (2, 2, False)])
def test_conv2d_matches_loop_reference(stride, padding, bias):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
    w = rng.standard_normal((3, 4, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32) if bias else None
    out = conv2d(Tensor(x), Tensor(w), Tensor(b) if bias else None, stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv2d_loop(x, w, b, stride, padding), atol=1e-5, rtol=1e-5)


def test_conv2d_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="not positive"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -- linear / activations ----------------------------------------------------

def test_linear_examples():
    x = Tensor([[1.0, 2.0]])
    np.testing.assert_allclose(linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x.data)
    np.testing.assert_allclose(linear(x, Tensor([[1.0, 1.0], [1.0, -1.0]]), Tensor([0.0, 1.0])).data, [[3.0, 0.0]])
    rows = linear(Tensor(np.ones((3, 2))), Tensor(np.zeros((2, 2))), Tensor([4.0, -1.0])).data
    np.testing.assert_allclose(rows, [[4.0, -1.0]] * 3)
    with pytest.raises(ValueError):
        linear(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))))


def test_activation_values():
    assert sigmoid(Tensor([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])
    np.testing.assert_allclose(softmax(Tensor(np.full((1, 5), 2.5)), axis=1).data, np.full((1, 5), 0.2))
    assert sigmoid(Tensor([-1000.0, 1000.0])).data.tolist() == [0.0, 1.0]


# -- normalization ------------------------------------------------------------

def test_batch_norm_train_statistics():
    x = np.random.default_rng(1).standard_normal((4, 3, 5, 6)) * 3 + 2
    y = batch_norm_2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batch_norm_constant_channel_gives_beta():
    y = batch_norm_2d(Tensor(np.full((2, 1, 3, 3), 7.0)), Tensor([1.0]), Tensor([5.0])).data
    np.testing.assert_allclose(y, 5.0)


def test_batch_norm_eval_identity_and_running_update():
    x = np.random.default_rng(2).standard_normal((2, 3, 4, 4)).astype(np.float32)
    mean, var = np.zeros(3, np.float32), np.ones(3, np.float32)
    y = batch_norm_2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), mean, var, training=False).data
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-6)
    batch_norm_2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), mean, var, training=True)
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5, atol=1e-7)
    with pytest.raises(ValueError):
        batch_norm_2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), training=False)


def test_instance_norm_rows():
    x = np.random.default_rng(3).standard_normal((2, 4, 9)) * 5
    y = instance_norm_freq(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    np.testing.assert_allclose(y.mean(axis=2), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=2), 1, atol=1e-4)
    shifted = instance_norm_freq(Tensor(x + 10), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    np.testing.assert_allclose(shifted, y, atol=1e-4)
    beta = np.arange(4.0)
    flat = instance_norm_freq(Tensor(np.ones((1, 4, 6)) * np.arange(4)[:, None]), Tensor(np.ones(4)), Tensor(beta))
    np.testing.assert_allclose(flat.data[0], np.repeat(beta[:, None], 6, axis=1))
    with pytest.raises(ValueError):
        instance_norm_freq(Tensor(np.ones((1, 4, 1))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_reduce_moments_examples():
    mean, std = reduce_moments(Tensor([1.0, 2.0, 3.0]), 0)
    assert mean.data == pytest.approx(2.0)
    assert std.data == pytest.approx(np.sqrt(2 / 3), rel=1e-6)
    mean, std = reduce_moments(Tensor(np.full((3, 4), 1.5)), (0, 1))
    assert mean.data == pytest.approx(1.5)
    assert std.data <= np.sqrt(1e-8) * 1.01
    with pytest.raises(ValueError):
        reduce_moments(Tensor([1.0]), ())


@given(arrays(np.float64, (3, 7), elements=st.floats(-100, 100)), st.randoms(use_true_random=False))
@settings(max_examples=50, deadline=None)
def test_reduce_moments_permutation_invariant(x, rnd):
    perm = list(range(7))
    rnd.shuffle(perm)
    with precision("float64"):
        m1, s1 = reduce_moments(Tensor(x), 1)
        m2, s2 = reduce_moments(Tensor(x[:, perm]), 1)
    np.testing.assert_allclose(m1.data, m2.data, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(s1.data, s2.data, rtol=1e-12, atol=1e-12)


def test_broadcast_mul():
    x = np.random.default_rng(4).standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(broadcast_mul(Tensor(x), Tensor(np.ones((1, 3, 4, 1)))).data, x.astype(np.float32))
    assert not broadcast_mul(Tensor(x), Tensor(np.zeros((1, 3, 4, 1)))).data.any()
    assert broadcast_mul(Tensor([[2.0]]), Tensor([[3.0]])).data[0, 0] == 6.0
    with pytest.raises(ValueError):
        broadcast_mul(Tensor(x), Tensor(np.ones((1, 2, 4, 1))))


# -- backward -------------------------------------------------------------------

def test_backward_sum_and_square():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Tensor([1.0, -2.0], requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_allclose(y.grad, [2.0, -4.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError, match="twice"):
        loss.backward()


def test_backward_accumulates_over_shared_input():
    with precision("float64"):
        a = np.random.default_rng(5).standard_normal(6)
        x = Tensor(a, requires_grad=True)
        (F.tanh(x).sum() + (x * x * x).sum()).backward()
        both = x.grad
        x1 = Tensor(a, requires_grad=True)
        F.tanh(x1).sum().backward()
        x2 = Tensor(a, requires_grad=True)
        (x2 * x2 * x2).sum().backward()
    np.testing.assert_allclose(both, x1.grad + x2.grad, rtol=1e-12)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3
    assert not y.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(FloatingPointError):
        Tensor([0.0]).log()


@given(arrays(np.float32, (2, 3, 4, 4), elements=st.floats(-1e3, 1e3, width=32)))
@settings(max_examples=40, deadline=None)
def test_ops_stay_finite_on_finite_inputs(x):
    t = Tensor(x)
    for out in (sigmoid(t), tanh(t), relu(t), softmax(t, axis=3), reduce_moments(t, (2, 3))[1],
                batch_norm_2d(t, Tensor(np.ones(3)), Tensor(np.zeros(3))),
                instance_norm_freq(t.reshape(2, 12, 4), Tensor(np.ones(12)), Tensor(np.zeros(12)))):
        assert np.isfinite(out.data).all()


# -- gradient checks (64-bit) ----------------------------------------------------

GRAD_CASES = {
    "conv2d": (lambda x, w: conv2d(x, w, padding=1), [(1, 2, 5, 5), (3, 2, 3, 3)]),
    "conv2d_stride2_bias": (lambda x, w, b: conv2d(x, w, b, stride=2, padding=1), [(2, 2, 6, 7), (3, 2, 3, 3), (3,)]),
    "conv2d_7x7": (lambda x, w: conv2d(x, w, padding=3), [(1, 1, 8, 9), (2, 1, 7, 7)]),
    "linear": (lambda x, w, b: linear(x, w, b), [(3, 4), (2, 4), (2,)]),
    "batch_norm_train": (lambda x, g, b: batch_norm_2d(x, g, b), [(4, 3, 2, 2), (3,), (3,)]),
    "instance_norm": (lambda x, g, b: instance_norm_freq(x, g, b), [(2, 3, 5), (3,), (3,)]),
    "relu": (relu, [(4, 5)]),
    "tanh": (tanh, [(4, 5)]),
    "softmax": (lambda x: softmax(x, axis=1), [(3, 6)]),
    "log_softmax": (lambda x: F.log_softmax(x, axis=1), [(3, 6)]),
    "moments_mean": (lambda x: reduce_moments(x, (1, 3))[0], [(2, 3, 2, 4)]),
    "moments_std": (lambda x: reduce_moments(x, (2, 3))[1], [(2, 3, 4, 5)]),
    "broadcast_mul": (lambda x, w: broadcast_mul(x, w), [(2, 3, 4, 5), (1, 3, 4, 1)]),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "div": (lambda a, b: a / (b * b + 1.0), [(3, 4), (3, 4)]),
    "exp_log_sqrt": (lambda a: ((a * a + 1.0).log() + (a * a + 0.5).sqrt()).exp(), [(5,)]),
    "reshape_transpose": (lambda a: a.reshape(3, 8).transpose(1, 0) * 2.0, [(2, 3, 4)]),
    "mean_keepdims": (lambda a: a.mean(axis=(0, 2), keepdims=True) * a, [(2, 3, 4)]),
    "concat": (lambda a, b: F.concat([a, b * 2.0], axis=1), [(2, 3), (2, 4)]),
    "l2_normalize": (lambda a: F.l2_normalize(a, axis=1), [(3, 5)]),
    "getitem": (lambda a: a[:, 1:3] * 3.0, [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_grad_check_ops(name):
    fn, shapes = GRAD_CASES[name]
    assert grad_check(fn, shapes, seed=1) < 1e-4


def test_grad_check_sigmoid_scalar():
    assert grad_check(sigmoid, [(1,)], seed=2) < 1e-6


def test_grad_check_random_composite_graph():
    def composite(x, w1, w2):
        h = tanh(linear(x, w1))
        s = sigmoid(linear(h, w2))
        m, sd = reduce_moments(h, 1)
        return (s * s).sum() + (m * sd).sum() + softmax(h, axis=1).sum(axis=0)

    assert grad_check(composite, [(4, 5), (6, 5), (3, 6)], seed=3) < 1e-4


# -- adam -----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]))
    adam_step([p], [np.zeros(2)], AdamState(), lr=0.001)
    np.testing.assert_array_equal(p.data, np.array([1.0, -2.0], np.float32))


def test_adam_first_step_closed_form():
    with precision("float64"):
        p = Tensor(np.array([0.5]))
        adam_step([p], [np.array([1.0])], AdamState(), lr=0.001)
    # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
    assert p.data[0] - 0.5 == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_decoupled_weight_decay():
    with precision("float64"):
        p = Tensor(np.array([1.0]))
        adam_step([p], [np.zeros(1)], AdamState(), lr=0.001, weight_decay=2e-5)
    assert p.data[0] == pytest.approx(0.99999998, abs=1e-15)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(FloatingPointError):
        adam_step([Tensor([1.0])], [np.array([np.nan])], AdamState(), lr=0.1)
