import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlris_track import tensor_nn as tn
from xlris_track.tensor_nn import layers as L
from xlris_track.tensor_nn.tensor import Tensor, backward, square

RTOL = 1e-4


def projected(out_fn, shape_seed=0):
    """Scalar loss sum(out * R) with a fixed random R, so every output entry matters."""
    cache = {}

    def loss():
        out = out_fn()
        if "r" not in cache:
            cache["r"] = np.random.default_rng(shape_seed).normal(size=out.shape)
        return (out * cache["r"]).sum()

    return loss


# ---- conv2d ----

def conv_oracle(x, w, b, stride, pad):
    ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((ci, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                s = b[o]
                for c in range(ci):
                    for u in range(k):
                        for v in range(k):
                            s += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = s
    return out


def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(1, 5, 4))
    out = tn.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_weights_gives_bias():
    x = np.random.default_rng(0).normal(size=(2, 5, 4))
    out = tn.conv2d(x, np.zeros((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]), padding=1)
    for c, b in enumerate([1.0, -2.0, 0.5]):
        assert np.all(out.data[c] == b)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 1, 3, 3)), rng.normal(size=1)
    np.testing.assert_allclose(tn.conv2d(x, w, b).data, conv_oracle(x, w, b, 1, 0), atol=1e-10)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1)])
def test_conv_multichannel_oracle(stride, pad):
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(3, 7, 6)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
    got = tn.conv2d(x, w, b, stride=stride, padding=pad).data
    np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, pad), atol=1e-10)


def test_conv_shape_errors_name_dims():
    with pytest.raises(tn.ShapeError, match="channels"):
        tn.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(tn.ShapeError, match="kernel"):
        tn.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 9),
       st.integers(1, 9), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2))
def test_shape_algebra_fuzz(b, ci, co, h, w, k, stride, pad):
    if k > h + 2 * pad or k > w + 2 * pad:
        with pytest.raises(tn.ShapeError):
            tn.conv2d(np.zeros((b, ci, h, w)), np.zeros((co, ci, k, k)), padding=pad)
        return
    out = tn.conv2d(np.zeros((b, ci, h, w)), np.zeros((co, ci, k, k)), stride=stride, padding=pad)
    assert out.shape == (b, co, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
    if k <= h and k <= w:
        p = tn.pool2d(np.zeros((b, ci, h, w)), "avg", k, stride)
        assert p.shape == (b, ci, (h - k) // stride + 1, (w - k) // stride + 1)
    u = tn.upsample(np.zeros((b, ci, h, w)), k + 2, stride + 3)
    assert u.shape == (b, ci, k + 2, stride + 3)
    d = tn.dense(np.zeros((b, h)), np.zeros((w, h)), np.zeros(w))
    assert d.shape == (b, w)
    assert tn.flatten(np.zeros((b, ci, h, w)), 1).shape == (b, ci * h * w)


def test_conv_gradcheck():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=3))
    loss = projected(lambda: tn.conv2d(x, w, b, stride=2, padding=1))
    assert tn.gradient_check(loss, [x, w, b]) < RTOL


# ---- batch norm ----

def test_bn_constant_input_collapses_to_beta():
    x = np.full((4, 2, 3, 3), 7.0)
    out = tn.batch_norm(x, np.ones(2), np.zeros(2), tn.BatchNormState(2))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_bn_shift_and_unit_variance():
    x = np.random.default_rng(4).normal(3.0, 2.0, size=(16, 3, 5, 5))
    out = tn.batch_norm(x, np.ones(3), np.full(3, 5.0), tn.BatchNormState(3)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 5.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_bn_running_stats_and_eval():
    rng = np.random.default_rng(5)
    state = tn.BatchNormState(2)
    x = rng.normal(2.0, 3.0, size=(8, 2, 4, 4))
    tn.batch_norm(x, np.ones(2), np.zeros(2), state, training=True)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(state.running_mean, 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var, rtol=1e-12)
    out = tn.batch_norm(x, np.ones(2), np.zeros(2), state, training=False).data
    expected = (x - state.running_mean[None, :, None, None]) / np.sqrt(
        state.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_bn_empty_batch():
    with pytest.raises(tn.ShapeError):
        tn.batch_norm(np.zeros((0, 2, 3, 3)), np.ones(2), np.zeros(2), tn.BatchNormState(2))


def test_bn_gradcheck():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(3, 2, 3, 3)))
    g = Tensor(rng.normal(size=2))
    b = Tensor(rng.normal(size=2))
    loss = projected(lambda: tn.batch_norm(x, g, b, tn.BatchNormState(2)))
    assert tn.gradient_check(loss, [x, g, b]) < RTOL


# ---- relu / pool ----

def test_relu_values_and_mask():
    assert tn.relu(np.array([-1.0])).data[0] == 0.0
    assert tn.relu(np.array([2.0])).data[0] == 2.0
    x = Tensor(np.array([-1.5, -0.2, 0.3, 2.0]), requires_grad=True)
    backward(tn.relu(x).sum())
    eps = 1e-6
    numeric = [(max(v + eps, 0) - max(v - eps, 0)) / (2 * eps) for v in x.data]
    np.testing.assert_allclose(x.grad, numeric, atol=1e-6)
    np.testing.assert_array_equal(x.grad, (x.data > 0).astype(float))


def test_pool_small_cases():
    assert tn.pool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), "max", 2).data.item() == 4.0
    np.testing.assert_array_equal(tn.pool2d(np.full((1, 4, 4), 2.5), "avg", 2).data, 2.5)
    with pytest.raises(tn.ShapeError):
        tn.pool2d(np.zeros((1, 2, 2)), "max", 3)


@pytest.mark.parametrize("kind", ["max", "avg"])
def test_pool_loop_oracle(kind):
    x = np.random.default_rng(7).normal(size=(2, 6, 6))
    got = tn.pool2d(x, kind, 2, 2).data
    want = np.zeros((2, 3, 3))
    for c in range(2):
        for i in range(3):
            for j in range(3):
                win = x[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                want[c, i, j] = win.max() if kind == "max" else win.mean()
    if kind == "max":
        np.testing.assert_array_equal(got, want)
    else:
        np.testing.assert_allclose(got, want, rtol=1e-15)


@pytest.mark.parametrize("kind,stride", [("max", 2), ("avg", 2), ("max", 1), ("avg", 1)])
def test_pool_gradcheck(kind, stride):
    x = Tensor(np.random.default_rng(8).normal(size=(2, 2, 5, 5)))
    loss = projected(lambda: tn.pool2d(x, kind, 2, stride))
    assert tn.gradient_check(loss, [x]) < RTOL


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_relu_pool_flatten_are_1_lipschitz(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6))
    gap = np.abs(a - b).max()
    for f in (tn.relu, lambda t: tn.pool2d(t, "max", 2), lambda t: tn.pool2d(t, "avg", 2),
              tn.flatten):
        assert np.abs(f(a).data - f(b).data).max() <= gap + 1e-12


# ---- upsample ----

def test_upsample_identity():
    x = np.random.default_rng(9).normal(size=(2, 4, 4))
    for mode in ("nearest", "bilinear"):
        np.testing.assert_allclose(tn.upsample(x, 4, 4, mode).data, x, rtol=1e-15)


def test_upsample_nearest_index_map():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    want = np.array([[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]], float)
    np.testing.assert_array_equal(tn.upsample(x, 4, 4, "nearest").data, want)


def test_upsample_bilinear_half_pixel():
    # corner alignment off: 1D [0, 1] -> 4 samples at src -0.25, 0.25, 0.75, 1.25 (clamped)
    x = np.array([[[0.0, 1.0]]])
    out = tn.upsample(x, 1, 4, "bilinear").data[0, 0]
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


def test_upsample_to_full_size():
    assert tn.upsample(np.zeros((2, 4, 4)), 256, 256).shape == (2, 256, 256)


def test_upsample_gradcheck():
    x = Tensor(np.random.default_rng(10).normal(size=(2, 3, 4)))
    loss = projected(lambda: tn.upsample(x, 7, 5, "bilinear"))
    assert tn.gradient_check(loss, [x]) < RTOL


# ---- dense / flatten / dropout ----

def test_dense_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(tn.dense(x, np.eye(3), np.zeros(3)).data, x)
    np.testing.assert_array_equal(tn.dense(x, np.zeros((2, 3)), np.array([4.0, 5.0])).data, [4, 5])


def test_dense_dot_oracle():
    rng = np.random.default_rng(11)
    W, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=3)
    got = tn.dense(x, W, b).data
    for i in range(4):
        assert got[i] == pytest.approx(sum(W[i, j] * x[j] for j in range(3)) + b[i], abs=1e-12)
    with pytest.raises(tn.ShapeError):
        tn.dense(np.zeros(2), W, b)


def test_dense_gradcheck():
    rng = np.random.default_rng(12)
    x, W, b = (Tensor(rng.normal(size=s)) for s in [(5, 3), (4, 3), (4,)])
    assert tn.gradient_check(projected(lambda: tn.dense(x, W, b)), [x, W, b]) < RTOL


def test_flatten_cases():
    assert tn.flatten(np.zeros((1, 1, 1))).shape == (1,)
    assert tn.flatten(np.zeros((2, 3))).shape == (6,)
    x = np.random.default_rng(13).normal(size=(2, 3, 4))
    np.testing.assert_array_equal(tn.flatten(x).data.reshape(2, 3, 4), x)


def test_dropout_modes():
    x = np.random.default_rng(14).normal(size=100)
    np.testing.assert_array_equal(tn.dropout(x, 0.0, True, 0).data, x)
    np.testing.assert_array_equal(tn.dropout(x, 0.5, False, 0).data, x)
    with pytest.raises(ValueError):
        tn.dropout(x, 1.0, True, 0)


def test_dropout_zero_fraction_binomial_bound():
    n, rate = 100_000, 0.3
    out = tn.dropout(np.ones(n), rate, True, 15).data
    frac = np.mean(out == 0)
    assert abs(frac - rate) <= 3 * math.sqrt(rate * (1 - rate) / n)
    np.testing.assert_allclose(out[out != 0], 1 / (1 - rate))


def test_dropout_train_deterministic_given_seed():
    x = np.ones(50)
    np.testing.assert_array_equal(tn.dropout(x, 0.4, True, 3).data, tn.dropout(x, 0.4, True, 3).data)


def test_dropout_off_gradcheck():
    x = Tensor(np.random.default_rng(16).normal(size=(3, 4)))
    assert tn.gradient_check(projected(lambda: tn.dropout(x, 0.5, False)), [x]) < RTOL


def test_dropout_fixed_mask_gradcheck():
    x = Tensor(np.random.default_rng(17).normal(size=(3, 4)))
    assert tn.gradient_check(projected(lambda: tn.dropout(x, 0.5, True, 1)), [x]) < RTOL


# ---- LSTM ----

def _cell(rng, n_in, h, scale=0.5):
    return L.LSTMCell(tn.Parameter(rng.normal(0, scale, (4 * h, n_in)), "wx"),
                      tn.Parameter(rng.normal(0, scale, (4 * h, h)), "wh"),
                      tn.Parameter(rng.normal(0, scale, 4 * h), "b"))


def scalar_lstm(x, h_prev, c_prev, wx, wh, b):
    n = len(h_prev)

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    def gate(k, j):
        row = k * n + j
        return (sum(wx[row, m] * x[m] for m in range(len(x)))
                + sum(wh[row, m] * h_prev[m] for m in range(n)) + b[row])

    h, c = [], []
    for j in range(n):
        f, i = sig(gate(0, j)), sig(gate(1, j))
        g, o = math.tanh(gate(2, j)), sig(gate(3, j))
        cj = f * c_prev[j] + i * g
        c.append(cj)
        h.append(o * math.tanh(cj))
    return h, c


def test_lstm_zero_params():
    cell = L.LSTMCell(tn.Parameter(np.zeros((8, 3)), "wx"), tn.Parameter(np.zeros((8, 2)), "wh"),
                      tn.Parameter(np.zeros(8), "b"))
    out, (h, c) = tn.lstm_step(np.ones(3), tn.zero_state((), 2), cell)
    assert np.all(c.data == 0) and np.all(out.data == 0)


def test_lstm_forget_saturation_keeps_memory():
    wx, wh, b = np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8)
    b[:2] = 50.0  # forget gate -> 1
    b[2:4] = -50.0  # input gate -> 0
    cell = L.LSTMCell(tn.Parameter(wx, "wx"), tn.Parameter(wh, "wh"), tn.Parameter(b, "b"))
    c_prev = np.array([0.7, -1.3])
    _, (_, c) = tn.lstm_step(np.ones(3), (np.zeros(2), c_prev), cell)
    np.testing.assert_allclose(c.data, c_prev, atol=1e-15)


def test_lstm_scalar_equation_oracle():
    rng = np.random.default_rng(18)
    cell = _cell(rng, 3, 2, 0.3)
    x, h0, c0 = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
    out, (h, c) = tn.lstm_step(x, (h0, c0), cell)
    h_ref, c_ref = scalar_lstm(x, h0, c0, cell.w_x.data, cell.w_h.data, cell.b.data)
    np.testing.assert_allclose(h.data, h_ref, atol=1e-12)
    np.testing.assert_allclose(c.data, c_ref, atol=1e-12)
    np.testing.assert_array_equal(out.data, h.data)


def test_lstm_step_gradcheck():
    rng = np.random.default_rng(19)
    cell = _cell(rng, 3, 4)
    x = Tensor(rng.normal(size=(2, 3)))
    h0, c0 = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))

    def out():
        h, (_, c) = tn.lstm_step(x, (h0, c0), cell)
        return tn.concat([h, c], axis=-1)

    assert tn.gradient_check(projected(out), [x, h0, c0] + cell.parameters()) < RTOL


def test_bilstm_length_one():
    rng = np.random.default_rng(20)
    f, b = _cell(rng, 3, 2), _cell(rng, 3, 2)
    x = rng.normal(size=3)
    outs, _, _ = tn.bilstm_forward([x], f, b)
    hf, _ = tn.lstm_step(x, tn.zero_state((), 2), f)
    hb, _ = tn.lstm_step(x, tn.zero_state((), 2), b)
    assert len(outs) == 1
    np.testing.assert_array_equal(outs[0].data, np.concatenate([hf.data, hb.data]))


def test_bilstm_zero_params():
    z = L.LSTMCell(tn.Parameter(np.zeros((8, 3)), "a"), tn.Parameter(np.zeros((8, 2)), "b"),
                   tn.Parameter(np.zeros(8), "c"))
    outs, _, _ = tn.bilstm_forward([np.ones(3)] * 4, z, z)
    assert all(np.all(o.data == 0) for o in outs)


def test_bilstm_composition_oracle():
    rng = np.random.default_rng(21)
    f, b = _cell(rng, 3, 2), _cell(rng, 3, 2)
    seq = [rng.normal(size=3) for _ in range(5)]
    outs, _, _ = tn.bilstm_forward(seq, f, b)

    def run(cell, xs):
        state, hs = tn.zero_state((), 2), []
        for x in xs:
            h, state = tn.lstm_step(x, state, cell)
            hs.append(h.data)
        return hs

    fwd = run(f, seq)
    bwd = run(b, seq[::-1])[::-1]
    for k in range(5):
        np.testing.assert_array_equal(outs[k].data, np.concatenate([fwd[k], bwd[k]]))


def test_bilstm_empty():
    rng = np.random.default_rng(22)
    with pytest.raises(tn.ShapeError):
        tn.bilstm_forward([], _cell(rng, 3, 2), _cell(rng, 3, 2))


def test_bilstm_gradcheck():
    rng = np.random.default_rng(23)
    f, b = _cell(rng, 2, 3), _cell(rng, 2, 3)
    seq = [Tensor(rng.normal(size=(2, 2))) for _ in range(4)]

    def out():
        outs, _, _ = tn.bilstm_forward(seq, f, b)
        return tn.stack(outs)

    assert tn.gradient_check(projected(out), seq + f.parameters() + b.parameters()) < RTOL


# ---- autodiff core ----

def test_backward_sum_and_square():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, 1.0)
    x.grad = None
    backward(square(x).sum())
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(tn.ShapeError):
        backward(x * 2.0)


def test_shared_subgraph_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    backward((y + y).sum())
    assert x.grad[0] == pytest.approx(8.0)


def test_getitem_fancy_index_gradcheck():
    x = Tensor(np.random.default_rng(24).normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4])
    assert tn.gradient_check(projected(lambda: x[idx]), [x]) < RTOL


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with tn.no_grad():
        y = x * 3.0
    assert not y.requires_grad


# ---- Adam ----

def test_adam_zero_grad_and_zero_lr():
    p = tn.Parameter(np.array([1.0, 2.0]), "p")
    opt = tn.Adam([p])
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    q = tn.Parameter(np.array([1.0]), "q")
    opt = tn.Adam([q], lr=0.0)
    q.grad = np.array([5.0])
    opt.step()
    assert q.data[0] == 1.0


def test_adam_one_step_hand_calc():
    w = tn.Parameter(np.array([1.0]), "w")
    opt = tn.Adam([w], lr=1e-3)
    backward(square(w).sum())  # grad = 2
    opt.step()
    # m = 0.1*2 = 0.2, v = 0.001*4 = 0.004; m_hat = 2, v_hat = 4
    # w = 1 - 1e-3 * 2 / (2 + 1e-8)
    assert w.data[0] == pytest.approx(1.0 - 1e-3 * 2.0 / (2.0 + 1e-8), abs=1e-15)


# ---- checkpoints ----

def test_checkpoint_roundtrip_and_layout(tmp_path):
    rng = np.random.default_rng(25)
    params = [tn.Parameter(rng.normal(size=(2, 3)), "a.w"), tn.Parameter(rng.normal(size=4), "a.b")]
    tn.save_checkpoint(params, tmp_path, {"note": "x"})
    raw = np.fromfile(tmp_path / "params.bin", dtype="<f8")
    np.testing.assert_array_equal(raw[:6], params[0].data.reshape(-1))
    fresh = [tn.Parameter(np.zeros((2, 3)), "a.w"), tn.Parameter(np.zeros(4), "a.b")]
    tn.load_into(fresh, tmp_path)
    for p, q in zip(params, fresh):
        np.testing.assert_array_equal(p.data, q.data)
    _, meta = tn.read_checkpoint(tmp_path)
    assert meta["note"] == "x"
