import numpy as np
import pytest

from ecg_tinynet import ops
from ecg_tinynet.exceptions import IndexOutOfRange, ShapeMismatch, UninitializedState
from ecg_tinynet.ops import BatchNormState
from ecg_tinynet.tensor import Rng, Tape, Tensor, clip_global_norm, global_norm, init_params

from helpers import gradcheck

N_CASES = 20
POINTWISE_TOL = 1e-6
BPTT_TOL = 1e-5


def cases(seed):
    rng = np.random.default_rng(seed)
    for _ in range(N_CASES):
        yield rng


# -- conv1d ------------------------------------------------------------------

def test_conv1d_identity_kernel():
    x = Tensor(np.arange(10.0).reshape(1, 1, 10))
    w = Tensor(np.ones((1, 1, 1)))
    out = ops.conv1d(x, w, Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv1d_hand_unrolled_valid():
    x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    w = Tensor(np.array([[[1.0, 0.0, -1.0]]]))
    out = ops.conv1d(x, w, padding="valid")
    np.testing.assert_array_equal(out.data, [[[-2.0]]])


@pytest.mark.parametrize("length,stride", [(15000, 1), (15000, 2), (7, 3), (1, 1)])
def test_conv1d_same_length(length, stride):
    x = Tensor(np.zeros((1, 2, length)))
    w = Tensor(np.zeros((3, 2, 5)))
    assert ops.conv1d(x, w, stride=stride).shape == (1, 3, -(-length // stride))


def test_conv1d_against_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 11))
    w = rng.normal(size=(4, 3, 5))
    b = rng.normal(size=4)
    out = ops.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding="same").data
    # TF-style split of the same-padding: total 4, left 2
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2)))
    expect = np.zeros((2, 4, 6))
    for n in range(2):
        for o in range(4):
            for t in range(6):
                expect[n, o, t] = np.sum(w[o] * xp[n, :, 2 * t:2 * t + 5]) + b[o]
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_conv1d_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ops.conv1d(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 3, 3))))


def test_conv1d_gradients():
    for rng in cases(10):
        n, c_in, c_out = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k, stride = rng.integers(1, 5), rng.integers(1, 3)
        length = rng.integers(k, 12)
        padding = ["same", "valid"][rng.integers(2)]
        arrays = [rng.normal(size=(n, c_in, length)), rng.normal(size=(c_out, c_in, k)),
                  rng.normal(size=c_out)]
        err = gradcheck(lambda x, w, b: ops.conv1d(x, w, b, stride, padding), arrays)
        assert err < POINTWISE_TOL


# -- batchnorm ---------------------------------------------------------------

def test_batchnorm_already_normalized():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3, 50))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    y = ops.batchnorm1d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormState.create(3))
    np.testing.assert_allclose(y.data, x, rtol=1e-5)


def test_batchnorm_zero_scale():
    x = np.random.default_rng(1).normal(size=(2, 3, 7))
    y = ops.batchnorm1d(Tensor(x), Tensor(np.zeros(3)), Tensor(np.full(3, 5.0)), BatchNormState.create(3))
    np.testing.assert_array_equal(y.data, 5.0)


def test_batchnorm_moments_train():
    x = np.random.default_rng(2).normal(3.0, 4.0, size=(8, 5, 40))
    y = ops.batchnorm1d(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5)), BatchNormState.create(5)).data
    assert np.all(np.abs(y.mean(axis=(0, 2))) < 1e-6)
    var = y.var(axis=(0, 2))
    assert np.all((var > 1 - 1e-3) & (var < 1 + 1e-3))


def test_batchnorm_running_stats_and_eval():
    x = np.random.default_rng(3).normal(2.0, 1.0, size=(4, 2, 10))
    state = BatchNormState.create(2, dtype=np.float64)
    with pytest.raises(UninitializedState):
        ops.batchnorm1d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, mode="eval")
    ops.batchnorm1d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, mode="train")
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2)))
    y = ops.batchnorm1d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, mode="eval").data
    expect = (x - state.running_mean[None, :, None]) / np.sqrt(state.running_var[None, :, None] + 1e-5)
    np.testing.assert_allclose(y, expect)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(mode):
    for rng in cases(11):
        n, c, length = rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 9)
        state = BatchNormState.create(c, dtype=np.float64)
        state.running_mean = rng.normal(size=c)
        state.running_var = rng.uniform(0.5, 2.0, size=c)
        state.num_batches_tracked = 1
        arrays = [rng.normal(size=(n, c, length)), rng.normal(size=c), rng.normal(size=c)]
        err = gradcheck(lambda x, g, b: ops.batchnorm1d(x, g, b, state, mode), arrays)
        assert err < POINTWISE_TOL


# -- activations -------------------------------------------------------------

def test_softmax_uniform_and_sigmoid_half():
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros((1, 9)))).data, 1 / 9)
    assert ops.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5


def test_softmax_shift_invariance_and_validity():
    rng = np.random.default_rng(4)
    for _ in range(N_CASES):
        x = rng.normal(scale=5, size=(3, 9))
        p = ops.softmax(Tensor(x)).data
        np.testing.assert_allclose(ops.softmax(Tensor(x + 1000)).data, p, atol=1e-6)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


def test_sigmoid_open_interval_and_stable():
    s = ops.sigmoid(Tensor(np.array([-30.0, -5.0, 0.0, 5.0, 30.0]))).data
    assert np.all((s > 0) & (s < 1))
    with np.errstate(over="raise"):
        ops.sigmoid(Tensor(np.array([-1000.0, 1000.0])))


@pytest.mark.parametrize("name", ["relu", "sigmoid", "tanh", "softmax"])
def test_pointwise_gradients(name):
    op = getattr(ops, name)
    for rng in cases(12):
        x = rng.normal(size=(rng.integers(1, 4), rng.integers(2, 6)))
        if name == "relu":
            x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        assert gradcheck(op, [x]) < POINTWISE_TOL


# -- pooling, dropout, mul, gap, concat ---------------------------------------

def test_maxpool_example_and_tiebreak():
    out = ops.maxpool1d(Tensor(np.array([[[1.0, 3.0, 2.0, 0.0]]])), 2, 2)
    np.testing.assert_array_equal(out.data, [[[3.0, 2.0]]])
    x = Tensor(np.array([[[4.0, 4.0]]]), requires_grad=True)
    with Tape() as tape:
        y = ops.sum_all(ops.maxpool1d(x, 2))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0]]])


def test_dropout_identity_cases():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    rng = np.random.default_rng(1)
    assert ops.dropout(x, 0.0, "train", rng) is x
    assert ops.dropout(x, 0.5, "eval", None) is x


def test_dropout_inverted_scaling():
    x = Tensor(np.ones((200, 500)))
    y = ops.dropout(x, 0.3, "train", np.random.default_rng(0)).data
    assert set(np.unique(y).round(6)) == {0.0, round(1 / 0.7, 6)}
    assert abs(y.mean() - 1.0) < 0.01


def test_mul_broadcast_and_error():
    a = Tensor(np.ones((2, 3, 4)))
    gate = Tensor(np.full((2, 1, 4), 0.5))
    np.testing.assert_array_equal(ops.mul(a, gate).data, 0.5)
    with pytest.raises(ShapeMismatch):
        ops.mul(a, Tensor(np.ones((2, 2, 4))))


def test_gap_of_ones():
    np.testing.assert_array_equal(ops.gap(Tensor(np.ones((1, 5, 7)))).data, np.ones((1, 5)))


def test_structural_op_gradients():
    for rng in cases(13):
        n, c, length = rng.integers(1, 3), rng.integers(1, 4), rng.integers(2, 10)
        pool = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        if length < pool:
            length = pool
        x = rng.permutation(n * c * length).reshape(n, c, length) / 7.0  # distinct values, no ties
        assert gradcheck(lambda t: ops.maxpool1d(t, pool, stride), [x]) < POINTWISE_TOL
        assert gradcheck(ops.gap, [rng.normal(size=(n, c, length))]) < POINTWISE_TOL
        assert gradcheck(lambda t: ops.dropout(t, 0.4, "eval", None), [rng.normal(size=(n, c))]) < POINTWISE_TOL
        a, b = rng.normal(size=(n, c, length)), rng.normal(size=(n, 1, length))
        assert gradcheck(ops.mul, [a, b]) < POINTWISE_TOL
        assert gradcheck(lambda p, q: ops.concat([p, q], axis=1), [a, b]) < POINTWISE_TOL


def test_dropout_train_gradient_uses_same_mask():
    x = np.random.default_rng(5).normal(size=(3, 6))
    err = gradcheck(lambda t: ops.dropout(t, 0.5, "train", np.random.default_rng(9)), [x])
    assert err < POINTWISE_TOL


def test_fan_out_accumulates():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 5))
    # y = sigmoid(x) * x + relu(x): x is used three times
    err = gradcheck(lambda t: ops.add(ops.mul(ops.sigmoid(t), t), ops.relu(t)), [x])
    assert err < POINTWISE_TOL


def test_eval_backward_consumes_no_randomness():
    state = BatchNormState.create(2, dtype=np.float64)
    state.num_batches_tracked = 1
    x = np.random.default_rng(7).normal(size=(2, 2, 6))
    rng = np.random.default_rng(0)
    before = rng.bit_generator.state
    grads = []
    for _ in range(2):
        t = Tensor(x, requires_grad=True)
        with Tape() as tape:
            y = ops.dropout(ops.batchnorm1d(t, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "eval"),
                            0.5, "eval", rng)
            y = ops.sum_all(y)
        tape.backward(y)
        grads.append(t.grad)
    np.testing.assert_array_equal(grads[0], grads[1])
    assert rng.bit_generator.state == before


# -- dense, loss ---------------------------------------------------------------

def test_dense_and_loss_gradients():
    for rng in cases(14):
        n, f_in, k = rng.integers(1, 5), rng.integers(1, 6), rng.integers(2, 6)
        arrays = [rng.normal(size=(n, f_in)), rng.normal(size=(k, f_in)), rng.normal(size=k)]
        assert gradcheck(ops.dense, arrays) < POINTWISE_TOL
        targets = rng.integers(0, k, size=n)
        w = rng.uniform(0.2, 3.0, size=k)
        err = gradcheck(lambda z: ops.weighted_cross_entropy(z, targets, w), [rng.normal(size=(n, k))])
        assert err < POINTWISE_TOL


def test_weighted_ce_values():
    onehot = np.eye(3)[[0, 2]]
    assert ops.weighted_ce_from_probs(onehot, [0, 2]) <= 1.2e-7
    p = np.array([[0.7, 0.2, 0.1]])
    assert ops.weighted_ce_from_probs(p, [0]) == pytest.approx(-np.log(0.7), abs=1e-12)
    assert ops.weighted_ce_from_probs(p, [0]) == pytest.approx(0.35667494, abs=1e-8)


def test_weighted_ce_linear_in_weight():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(1, 4))
    base = float(ops.weighted_cross_entropy(Tensor(logits), np.array([2]), np.ones(4)).data)
    w = np.ones(4)
    w[2] = 2.0
    doubled = float(ops.weighted_cross_entropy(Tensor(logits), np.array([2]), w).data)
    assert doubled == pytest.approx(2 * base, rel=1e-12)


def test_weighted_ce_logits_matches_probs_and_unweighted():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(6, 5))
    y = rng.integers(0, 5, size=6)
    p = ops.softmax(Tensor(logits)).data
    a = float(ops.weighted_cross_entropy(Tensor(logits), y, np.ones(5)).data)
    b = float(ops.weighted_cross_entropy(Tensor(logits), y).data)
    assert a == b == pytest.approx(ops.weighted_ce_from_probs(p, y), rel=1e-12)


def test_weighted_ce_index_errors():
    with pytest.raises(IndexOutOfRange):
        ops.weighted_cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))
    with pytest.raises(IndexOutOfRange):
        ops.weighted_ce_from_probs(np.full((1, 3), 1 / 3), [-1])


# -- LSTM ----------------------------------------------------------------------

def _lstm_params(rng, c, d, scale=0.5):
    return [rng.normal(scale=scale, size=(4 * d, c)), rng.normal(scale=scale, size=(4 * d, d)),
            rng.normal(scale=scale, size=4 * d)]


def test_lstm_against_reference_loop():
    rng = np.random.default_rng(15)
    n, c, d, length = 2, 3, 4, 6
    x = rng.normal(size=(n, c, length))
    k, u, b = _lstm_params(rng, c, d)
    sig = lambda z: 1 / (1 + np.exp(-z))
    h = np.zeros((n, d))
    cell = np.zeros((n, d))
    expect = np.zeros((n, d, length))
    for t in range(length):
        z = x[:, :, t] @ k.T + h @ u.T + b
        i, f, g, o = sig(z[:, :d]), sig(z[:, d:2 * d]), np.tanh(z[:, 2 * d:3 * d]), sig(z[:, 3 * d:])
        cell = f * cell + i * g
        h = o * np.tanh(cell)
        expect[:, :, t] = h
    got = ops.lstm(Tensor(x), Tensor(k), Tensor(u), Tensor(b)).data
    np.testing.assert_allclose(got, expect, rtol=1e-12, atol=1e-14)
    rev = ops.lstm(Tensor(x[:, :, ::-1].copy()), Tensor(k), Tensor(u), Tensor(b), reverse=True).data
    np.testing.assert_allclose(rev[:, :, ::-1], expect, rtol=1e-12, atol=1e-14)


def test_bilstm_single_step_symmetry():
    rng = np.random.default_rng(16)
    params = [Tensor(a) for a in _lstm_params(rng, 3, 4)]
    out = ops.bilstm(Tensor(rng.normal(size=(2, 3, 1))), params, params).data
    assert out.shape == (2, 8, 1)
    np.testing.assert_array_equal(out[:, :4], out[:, 4:])


def test_bilstm_zero_input_zero_output():
    rng = np.random.default_rng(17)
    fwd = [Tensor(a) for a in _lstm_params(rng, 3, 4)[:2]] + [Tensor(np.zeros(16))]
    bwd = [Tensor(a) for a in _lstm_params(rng, 3, 4)[:2]] + [Tensor(np.zeros(16))]
    out = ops.bilstm(Tensor(np.zeros((1, 3, 5))), fwd, bwd).data
    np.testing.assert_array_equal(out, 0.0)


def test_lstm_shape_mismatch():
    rng = np.random.default_rng(18)
    k, u, b = (Tensor(a) for a in _lstm_params(rng, 3, 4))
    with pytest.raises(ShapeMismatch):
        ops.lstm(Tensor(np.zeros((1, 2, 5))), k, u, b)


def test_bilstm_gradients():
    for rng in cases(19):
        n, c = rng.integers(1, 3), rng.integers(1, 4)
        d, length = rng.integers(1, 5), rng.integers(1, 9)
        arrays = [rng.normal(size=(n, c, length))] + _lstm_params(rng, c, d) + _lstm_params(rng, c, d)
        err = gradcheck(lambda x, *p: ops.bilstm(x, p[:3], p[3:]), arrays)
        assert err < BPTT_TOL


# -- init, clip, rng -----------------------------------------------------------

def test_clip_global_norm():
    g = [np.array([0.3, 0.4]), np.zeros(3)]
    out, norm = clip_global_norm(g, 1.0)
    assert norm == pytest.approx(0.5)
    assert all(np.array_equal(a, b) for a, b in zip(out, g))
    big = [np.array([6.0, 0.0]), np.array([[0.0, 8.0]])]
    out, norm = clip_global_norm(big, 1.0)
    assert norm == pytest.approx(10.0)
    assert abs(global_norm(out) - 1.0) < 1e-9


def test_init_deterministic_and_scaled():
    a = init_params((64, 12, 7), "he", Rng(5).stream("init"))
    b = init_params((64, 12, 7), "he", Rng(5).stream("init"))
    np.testing.assert_array_equal(a.data, b.data)
    assert a.requires_grad and a.dtype == np.float32
    assert abs(a.data.std() - np.sqrt(2 / 84)) < 0.01
    g = init_params((40, 30), "glorot", Rng(5).stream("init"), dtype=np.float64).data
    assert np.abs(g).max() <= np.sqrt(6 / 70)


def test_rng_streams_independent_and_reproducible():
    r = Rng(123)
    assert r.stream("dropout").random() == Rng(123).stream("dropout").random()
    assert r.stream("dropout").random() != r.stream("shuffle").random()
    with pytest.raises(ValueError):
        r.stream("nope")
