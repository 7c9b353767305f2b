import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depvox.nn import (LSTM, Adam, Conv1d, Dropout, FullWidthConv2d, Linear, LogSoftmax, ShapeError, StackedLSTM,
                       check_module, grad_check, load_checkpoint, log_softmax, save_checkpoint, softmax,
                       weighted_nll)
from depvox.nn.checkpoint import CheckpointError


def rng(seed=0):
    return np.random.default_rng(seed)


# -- fully connected ---------------------------------------------------------

def test_linear_identity():
    fc = Linear(3, 3, rng())
    fc.params["W"][...] = np.eye(3)
    x = rng(1).standard_normal((4, 3))
    np.testing.assert_array_equal(fc.forward(x), x)


def test_linear_affine():
    fc = Linear(2, 2, rng())
    fc.params["W"][...] = np.eye(2)
    fc.params["b"][...] = 1.0
    np.testing.assert_array_equal(fc.forward(np.array([[1.0, 2.0]])), [[2.0, 3.0]])


def test_linear_shape_error_lists_shapes():
    fc = Linear(5, 4, rng())
    with pytest.raises(ShapeError, match=r"\(3, 6\).*\(5, 4\)"):
        fc.forward(np.zeros((3, 6)))


@pytest.mark.parametrize("seed", range(10))
def test_linear_gradients(seed):
    fc = Linear(5, 4, rng(seed))
    x = rng(seed + 100).standard_normal((3, 5))
    dx = {}
    rep = check_module(fc, lambda: fc.forward(x), lambda d: dx.setdefault("x", fc.backward(d)), None, seed,
                       inputs={"x": x}, input_grads=lambda: dx)
    assert rep.max_rel_error < 1e-6


# -- LSTM --------------------------------------------------------------------

def test_lstm_zero_weights_zero_input():
    lstm = LSTM(3, 2, rng())
    for p in lstm.params.values():
        p[...] = 0.0
    np.testing.assert_array_equal(lstm.forward(np.zeros((1, 5, 3))), 0.0)


def test_lstm_single_step_hand_trace():
    # 1 unit, every weight 1, bias 0, input 1: all gate pre-activations are 1
    lstm = LSTM(1, 1, rng(), forget_bias=0.0)
    for p in lstm.params.values():
        p[...] = 1.0
    lstm.params["b"][...] = 0.0
    sig = 1.0 / (1.0 + np.exp(-1.0))
    c = sig * np.tanh(1.0)              # i * g, previous cell 0
    h = sig * np.tanh(c)
    np.testing.assert_allclose(lstm.forward(np.ones((1, 1, 1)))[0, 0, 0], h, rtol=1e-15)


def test_lstm_empty_sequence():
    with pytest.raises(ValueError, match="empty"):
        LSTM(3, 2, rng()).forward(np.zeros((1, 0, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_lstm_bptt_gradients(seed):
    lstm = LSTM(3, 2, rng(seed))
    x = rng(seed + 50).standard_normal((2, 4, 3))
    dx = {}
    rep = check_module(lstm, lambda: lstm.forward(x), lambda d: dx.setdefault("x", lstm.backward(d)), None, seed,
                       inputs={"x": x}, input_grads=lambda: dx)
    assert rep.max_rel_error < 1e-5


def test_stacked_lstm_gradients():
    m = StackedLSTM(3, 4, 2, rng(3))
    x = rng(4).standard_normal((2, 5, 3))
    assert check_module(m, lambda: m.forward(x), m.backward, None).max_rel_error < 1e-5


# -- convolutions ------------------------------------------------------------

def test_conv2d_averaging_kernel_preserves_constant():
    D, k = 6, 2
    conv = FullWidthConv2d(k, D, 1, rng())
    conv.params["W"][...] = 1.0 / (k * D)
    x = np.full((1, 7, D), 3.25)
    y = conv.forward(x)
    assert y.shape == (1, 6, 1)
    np.testing.assert_allclose(y, 3.25, rtol=1e-14)


def test_conv2d_boundary_length():
    conv = FullWidthConv2d(5, 4, 3, rng())
    assert conv.forward(np.zeros((2, 5, 4))).shape == (2, 1, 3)
    assert conv.kernel_shape == (5, 4)


def test_conv_too_short():
    with pytest.raises(ShapeError, match="shorter than kernel"):
        FullWidthConv2d(5, 4, 3, rng()).forward(np.zeros((1, 4, 4)))


def test_conv1d_length_arithmetic():
    assert Conv1d(3, 2, 4, rng()).forward(np.zeros((1, 7, 3))).shape == (1, 4, 2)


def test_conv1d_identity_channel_kernel_is_shifted_copy():
    C, k = 3, 4
    conv = Conv1d(C, C, k, rng())
    conv.params["W"][...] = 0.0
    conv.params["W"][2] = np.eye(C)     # picks x[t + 2]
    x = rng(1).standard_normal((2, 9, C))
    np.testing.assert_array_equal(conv.forward(x), x[:, 2:2 + 6])


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_gradients(seed):
    conv = FullWidthConv2d(3, 5, 4, rng(seed))
    x = rng(seed + 7).standard_normal((2, 6, 5))
    dx = {}
    rep = check_module(conv, lambda: conv.forward(x), lambda d: dx.setdefault("x", conv.backward(d)), None, seed,
                       inputs={"x": x}, input_grads=lambda: dx)
    assert rep.max_rel_error < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_conv1d_gradients(seed):
    conv = Conv1d(3, 2, 4, rng(seed))
    x = rng(seed + 9).standard_normal((2, 7, 3))
    dx = {}
    rep = check_module(conv, lambda: conv.forward(x), lambda d: dx.setdefault("x", conv.backward(d)), None, seed,
                       inputs={"x": x}, input_grads=lambda: dx)
    assert rep.max_rel_error < 1e-6


# -- activations, loss -------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_array_equal(softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])


@given(arrays(np.float64, (3, 4), elements=st.floats(-500, 500)), st.floats(-100, 100))
def test_softmax_rows_are_distributions_and_shift_invariant(z, c):
    p = softmax(z)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(np.argmax(softmax(z + c), axis=1), np.argmax(p, axis=1))


def test_dropout_eval_is_identity():
    x = rng().standard_normal((4, 5))
    assert Dropout(0.3).forward(x, train=False) is x


def test_dropout_scaling_and_determinism():
    x = np.ones((200, 50))
    a = Dropout(0.4).forward(x, True, rng(5))
    b = Dropout(0.4).forward(x, True, rng(5))
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.6}
    assert abs((a > 0).mean() - 0.6) < 0.02


def test_nll_perfect_prediction():
    loss, _ = weighted_nll(np.log(np.array([[1.0, 1e-300]])), np.array([0]))
    assert loss == 0.0


def test_nll_uniform_is_ln2():
    loss, _ = weighted_nll(np.log(np.full((3, 2), 0.5)), np.array([0, 1, 1]), np.array([1.0, 1.0]))
    assert loss == pytest.approx(np.log(2), rel=1e-15)


def test_nll_weight_linearity():
    lp = log_softmax(rng().standard_normal((4, 2)))
    y = np.ones(4, dtype=int)
    l1, _ = weighted_nll(lp, y, np.array([1.0, 1.0]))
    l2, _ = weighted_nll(lp, y, np.array([1.0, 2.0]))
    assert l2 == pytest.approx(2 * l1, rel=1e-14)


def test_nll_rejects_nonpositive_weights():
    with pytest.raises(ValueError):
        weighted_nll(np.zeros((1, 2)), np.array([0]), np.array([0.0, 1.0]))


@pytest.mark.parametrize("seed", range(10))
def test_logsoftmax_nll_gradients(seed):
    r = rng(seed)
    z = r.standard_normal((5, 2))
    y = r.integers(0, 2, 5)
    w = np.array([0.7, 2.0])
    ls = LogSoftmax()

    def loss():
        return weighted_nll(ls.forward(z), y, w)[0]

    _, d = weighted_nll(ls.forward(z), y, w)
    rep = grad_check(loss, {"z": z}, {"z": ls.backward(d)}, None)
    assert rep.max_rel_error < 1e-6


# -- Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    fc = Linear(3, 2, rng())
    before = {k: v.copy() for k, v in fc.params.items()}
    opt = Adam(fc.named_parameters())
    for _ in range(5):
        fc.zero_grad()
        opt.step()
    for k in before:
        np.testing.assert_array_equal(fc.params[k], before[k])


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
def test_adam_first_step_is_lr_times_sign(g):
    # m_hat = g, v_hat = g^2 after bias correction -> step = lr * g / (|g| + eps)
    p = np.array([1.0])
    grad = np.array([g])
    Adam([("p", p, grad)], lr=5e-4).step()
    np.testing.assert_allclose(1.0 - p[0], 5e-4 * np.sign(g) * abs(g) / (abs(g) + 1e-8), rtol=1e-12)


def test_adam_defaults():
    opt = Adam([])
    assert (opt.lr, opt.beta1, opt.beta2) == (5e-4, 0.9, 0.99)


def test_adam_determinism():
    def run():
        fc = Linear(4, 3, rng(2))
        opt = Adam(fc.named_parameters())
        x = rng(3).standard_normal((6, 4))
        for _ in range(10):
            fc.zero_grad()
            y = fc.forward(x)
            fc.backward(y)
            opt.step()
        return fc.params["W"].copy()

    np.testing.assert_array_equal(run(), run())


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    t = {"a.W": rng().standard_normal((3, 4)), "a.b": np.arange(4.0)}
    save_checkpoint(tmp_path / "m.ckpt", t, {"model": "x", "n": 3}, seeds={"root": 1})
    got, header = load_checkpoint(tmp_path / "m.ckpt")
    assert list(got) == ["a.W", "a.b"]
    np.testing.assert_array_equal(got["a.W"], t["a.W"].astype(np.float32))
    assert header["seeds"] == {"root": 1}
    assert header["arch"] == {"model": "x", "n": 3}


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad")


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(tmp_path / "m", {"w": np.ones((10, 10))}, {"model": "x"})
    buf = (tmp_path / "m").read_bytes()
    (tmp_path / "m").write_bytes(buf[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "m")
