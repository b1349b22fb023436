import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmh import autodiff as ad
from dmh.autodiff import Tape, Tensor, finite_difference_check
from dmh.errors import DimensionError, NonFiniteError, TapeConsumedError


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


# --- forward values ------------------------------------------------------------

def test_linear_identity_weights():
    out = ad.linear(T([[1, 2]]), T(np.eye(2)), T([0, 0]))
    np.testing.assert_array_equal(out.data, [[1, 2]])


def test_linear_hand_multiply():
    out = ad.linear(T([[1, 1]]), T([[2, 3], [4, 5]]), T([1, 1]))
    np.testing.assert_array_equal(out.data, [[7, 9]])


def test_linear_empty_batch():
    out = ad.linear(T(np.zeros((0, 3))), T(np.ones((3, 2))), T(np.zeros(2)))
    assert out.shape == (0, 2)


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        ad.linear(T(np.ones((1, 3))), T(np.ones((2, 2))), T(np.zeros(2)))


def test_sigmoid_values():
    assert ad.sigmoid(T(0.0)).item() == 0.5
    assert abs(ad.sigmoid(T(30.0)).item() - 1.0) < 1e-9
    assert abs(ad.sigmoid(T(-30.0)).item()) < 1e-9
    x = np.linspace(-8, 8, 33)
    np.testing.assert_allclose(ad.sigmoid(T(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-14, atol=1e-16)


def test_leaky_relu_definition():
    assert ad.leaky_relu(T(-2.0), 0.01).item() == pytest.approx(-0.02, abs=1e-15)
    assert ad.leaky_relu(T(3.0), 0.01).item() == 3.0
    assert ad.apply_activation(T(-2.0), "leaky_relu:0.2").item() == pytest.approx(-0.4)


def test_activation_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        ad.sigmoid(T([0.0, np.nan]))


def test_unknown_activation():
    with pytest.raises(ValueError):
        ad.apply_activation(T(0.0), "relu6")


def test_conv_identity_kernel():
    x = T([[1.0, -2.0, 3.0, 4.0]])
    k = np.zeros((1, 1, 3))
    k[0, 0, 1] = 1.0
    np.testing.assert_array_equal(ad.conv1d_same(x, T(k), T([0.0])).data, x.data)


def test_conv_ones_kernel():
    out = ad.conv1d_same(T([[1, 2, 3]]), T(np.ones((1, 1, 3))), T([0]))
    np.testing.assert_array_equal(out.data, [[3, 6, 5]])


def _conv_reference(x, k, b):
    c_out, c_in, _ = k.shape
    length = x.shape[1]
    out = np.zeros((c_out, length))
    for o in range(c_out):
        for t in range(length):
            acc = b[o]
            for c in range(c_in):
                for tap in range(3):
                    src = t + tap - 1
                    if 0 <= src < length:
                        acc += x[c, src] * k[o, c, tap]
            out[o, t] = acc
    return out


def test_conv_matches_loop_reference(rng):
    x, k, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 4, 3)), rng.normal(size=4)
    out = ad.conv1d_same(T(x), T(k), T(b))
    assert out.shape == (4, 5)
    np.testing.assert_allclose(out.data, _conv_reference(x, k, b), rtol=1e-13, atol=1e-13)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv1d_same(T(np.ones((2, 5))), T(np.ones((3, 3, 3))), T(np.zeros(3)))


@settings(max_examples=40, deadline=None)
@given(length=st.integers(1, 30), channels=st.integers(1, 4))
def test_conv_preserves_length(length, channels):
    x = T(np.ones((channels, length)))
    out = ad.conv1d_same(x, T(np.ones((channels, channels, 3))), T(np.zeros(channels)))
    assert out.shape == (channels, length)


def _lstm_layers(rng, n_in, hidden=35, layers=2, scale=0.3):
    out = []
    for _ in range(layers):
        out.append((T(rng.normal(scale=scale, size=(n_in, 4 * hidden))),
                    T(rng.normal(scale=scale, size=(hidden, 4 * hidden))),
                    T(rng.normal(scale=scale, size=4 * hidden))))
        n_in = hidden
    return out


def test_lstm_zero_weights_give_zero(rng):
    layers = [(T(np.zeros((3, 140))), T(np.zeros((35, 140))), T(np.zeros(140))),
              (T(np.zeros((35, 140))), T(np.zeros((35, 140))), T(np.zeros(140)))]
    out = ad.lstm_forward(T(rng.normal(size=(5, 3))), layers)
    assert out.shape == (35,)
    np.testing.assert_array_equal(out.data, 0.0)


def test_lstm_output_shape(rng):
    assert ad.lstm_forward(T(rng.normal(size=(5, 3))), _lstm_layers(rng, 3)).shape == (35,)
    assert ad.lstm_forward(T(rng.normal(size=(7, 5, 3))), _lstm_layers(rng, 3)).shape == (7, 35)


def test_lstm_single_unit_scalar_cell():
    # one step, one unit, gate order input / forget / candidate / output
    wi, wh, b, x = [0.5, -0.3, 0.8, 0.2], [0.1, 0.1, 0.1, 0.1], [0.05, 0.1, -0.2, 0.3], 0.7
    sig = lambda z: 1 / (1 + math.exp(-z))
    zi, zf, zg, zo = (wi[k] * x + b[k] for k in range(4))
    c = sig(zf) * 0.0 + sig(zi) * math.tanh(zg)
    h = sig(zo) * math.tanh(c)
    layer = [(T([wi]), T([wh]), T(b))]
    out = ad.lstm_forward(T([[x]]), layer)
    assert out.item() == pytest.approx(h, abs=1e-15)


def test_l1_examples():
    assert ad.l1_loss(T([1, 2]), T([1, 2])).item() == 0.0
    assert ad.l1_loss(T([1, 2]), T([2, 4])).item() == 1.5
    a, b = T([0.3, -1.0, 2.0]), T([1.0, 1.0, 1.0])
    assert ad.l1_loss(a, b).item() == ad.l1_loss(b, a).item()
    with pytest.raises(DimensionError):
        ad.l1_loss(T([1, 2]), T([1, 2, 3]))


# --- backward semantics ----------------------------------------------------------

def test_sum_of_params_has_unit_grads():
    ps = [T(np.arange(3.0), grad=True), T(np.ones((2, 2)), grad=True)]
    with Tape() as tape:
        loss = ad.add(ad.sum_all(ps[0]), ad.sum_all(ps[1]))
    tape.backward(loss)
    for p in ps:
        np.testing.assert_array_equal(p.grad, np.ones_like(p.data))


def test_squared_error_derivative():
    w = T(1.0, grad=True)
    with Tape() as tape:
        r = ad.mul(w, 2.0) - 0.0
        loss = ad.mul(r, r)
    tape.backward(loss)
    assert loss.item() == 4.0
    assert w.grad == 8.0


def test_second_backward_is_an_error():
    w = T([1.0, 2.0], grad=True)
    with Tape() as tape:
        loss = ad.sum_all(w)
    tape.backward(loss)
    with pytest.raises(TapeConsumedError):
        tape.backward(loss)


def test_backward_needs_scalar():
    w = T([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = ad.mul(w, 2.0)
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_unreachable_parameter_gets_zero():
    a, b = T([1.0, 2.0], grad=True), T([3.0], grad=True)
    with Tape() as tape:
        _ = ad.sum_all(b)
        loss = ad.sum_all(a)
    tape.backward(loss)
    np.testing.assert_array_equal(b.grad, [0.0])
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])


def test_grads_are_overwritten_not_accumulated():
    w = T([2.0], grad=True)
    for _ in range(3):
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(w, 3.0))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [3.0])


def test_no_tape_means_no_recording():
    w = T([1.0], grad=True)
    out = ad.sum_all(w)
    assert not out._tracked


def test_forward_is_deterministic_and_replayable(rng):
    x = rng.normal(size=(3, 4, 5))
    k, b = rng.normal(size=(4, 4, 3)), rng.normal(size=4)

    def run():
        kt, bt = T(k, grad=True), T(b, grad=True)
        with Tape() as tape:
            loss = ad.l1_loss(ad.sigmoid(ad.conv1d_same(T(x), kt, bt)), T(np.full((3, 4, 5), 0.3)))
        tape.backward(loss)
        return loss.data.copy(), kt.grad.copy(), bt.grad.copy()

    first, second = run(), run()
    for u, v in zip(first, second):
        assert u.tobytes() == v.tobytes()


# --- finite-difference checks ------------------------------------------------------

def test_fd_on_sum_is_tiny(rng):
    assert finite_difference_check(ad.sum_all, [T(rng.normal(size=(3, 4)))]) < 1e-8


def test_fd_linear_sigmoid_l1(rng):
    x, w, b = T(rng.normal(size=(4, 3))), T(rng.normal(size=(3, 2))), T(rng.normal(size=2))
    target = T(rng.uniform(size=(4, 2)))
    f = lambda x, w, b: ad.l1_loss(ad.sigmoid(ad.linear(x, w, b)), target)
    assert finite_difference_check(f, [x, w, b]) < 1e-4


def test_fd_conv_leaky_l1(rng):
    x, k, b = T(rng.normal(size=(3, 5))), T(rng.normal(size=(3, 3, 3))), T(rng.normal(size=3))
    target = T(rng.normal(size=(3, 5)))
    f = lambda x, k, b: ad.l1_loss(ad.leaky_relu(ad.conv1d_same(x, k, b), 0.05), target)
    assert finite_difference_check(f, [x, k, b]) < 1e-4


def test_fd_two_layer_lstm(rng):
    layers = _lstm_layers(rng, 2, hidden=4)
    flat = [t for layer in layers for t in layer]
    x = T(rng.normal(size=(2, 5, 2)))
    target = T(rng.normal(size=(2, 4)))

    def f(x, *params):
        ls = [tuple(params[i:i + 3]) for i in range(0, len(params), 3)]
        return ad.l1_loss(ad.lstm_forward(x, ls), target)

    assert finite_difference_check(f, [x, *flat]) < 1e-4


def test_fd_tanh_concat_index_weighted_sum(rng):
    a, b = T(rng.normal(size=(2, 3))), T(rng.normal(size=(2, 2)))
    v = rng.normal(size=(2, 5))

    def f(a, b):
        cat = ad.concat([ad.tanh(a), b], axis=1)
        part = ad.index(cat, (slice(None), slice(1, 4)))
        return ad.weighted_sum([ad.mean_all(part), ad.inner_const(cat, v),
                                ad.sum_all(ad.transpose(ad.reshape(cat, (5, 2)), (1, 0)))],
                               [0.5, 2.0, -1.0])

    assert finite_difference_check(f, [a, b]) < 1e-4


def test_inner_const_injects_gradient(rng):
    x = T(rng.normal(size=(3, 2)), grad=True)
    v = rng.normal(size=(3, 2))
    with Tape() as tape:
        out = ad.inner_const(x, v)
    tape.backward(out)
    assert x.grad.tobytes() == v.tobytes()


# --- Adam --------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = T([1.0, -2.0], grad=True)
    state = ad.AdamState.for_params([p], lr=0.1)
    ad.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_is_minus_lr():
    p = T([0.0, 5.0], grad=True)
    state = ad.AdamState.for_params([p], lr=0.1)
    ad.adam_step([p], [np.ones(2)], state)
    np.testing.assert_allclose(p.data, [-0.1, 4.9], atol=1e-6)
    assert abs(p.data[0] + 0.1 / (1 + 1e-8)) < 1e-15


def test_adam_steps_never_exceed_lr(rng):
    p = T([0.0], grad=True)
    state = ad.AdamState.for_params([p], lr=0.1)
    prev, deltas = 0.0, []
    for _ in range(20):
        ad.adam_step([p], [np.ones(1)], state)
        deltas.append(abs(p.data[0] - prev))
        prev = p.data[0]
    assert all(d <= 0.1 + 1e-12 for d in deltas)
    assert all(b <= a + 1e-15 for a, b in zip(deltas, deltas[1:]))
    assert all(np.all(v >= 0) for v in state.v)


def test_adam_rejects_non_finite_without_side_effects():
    p = T([1.0, 2.0], grad=True)
    state = ad.AdamState.for_params([p])
    with pytest.raises(NonFiniteError):
        ad.adam_step([p], [np.array([np.inf, 0.0])], state)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.t == 0


def test_adam_matches_reference_loop(rng):
    g_seq = rng.normal(size=(5, 3))
    p = T(rng.normal(size=3), grad=True)
    ref = p.data.copy()
    opt = ad.Adam([p], lr=0.01)
    m = v = np.zeros(3)
    for t, g in enumerate(g_seq, start=1):
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-14, atol=1e-15)


def test_init_uniform_bounds_and_seed():
    a = ad.init_uniform(np.random.default_rng(3), (50, 40), 25, "w")
    b = ad.init_uniform(np.random.default_rng(3), (50, 40), 25, "w")
    assert np.all(np.abs(a.data) <= 0.2)
    assert a.data.tobytes() == b.data.tobytes()
