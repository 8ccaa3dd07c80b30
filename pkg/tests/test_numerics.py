import math
import struct

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from mvawe.errors import ConfigurationError, DataError, NumericalError, UsageError, ValidationError
from mvawe.losses import cosine_distance
from mvawe.numerics import (AdamState, LSTMParams, Tape, Tensor, adam_update, backward,
                            gradient_check, init_lstm, load_tensors, lstm_cell,
                            lstm_sequence, lstm_sequences, lstm_step, save_tensors)
from mvawe.numerics import tensor as T


def scalar_lstm_cell(x, h, c, W, U, b):
    """Gate equations evaluated one unit at a time with math functions."""
    H = len(h)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    z = [b[k] + sum(x[d] * W[d][k] for d in range(len(x))) + sum(h[j] * U[j][k] for j in range(H))
         for k in range(4 * H)]
    h_new, c_new = [], []
    for u in range(H):
        i, f = sig(z[u]), sig(z[H + u])
        g, o = math.tanh(z[2 * H + u]), sig(z[3 * H + u])
        cu = f * c[u] + i * g
        c_new.append(cu)
        h_new.append(o * math.tanh(cu))
    return h_new, c_new


def const_params(W, U, b):
    return LSTMParams(Tensor(W, True), Tensor(U, True), Tensor(b, True))


class TestLSTMCell:
    def test_all_zero_gives_zero_state(self):
        p = const_params(np.zeros((3, 8)), np.zeros((2, 8)), np.zeros(8))
        h, c = lstm_cell(np.zeros(3), np.zeros(2), np.zeros(2), p)
        assert np.all(h.data == 0) and np.all(c.data == 0)

    def test_saturated_forget_gate_keeps_cell(self):
        H = 3
        b = np.zeros(4 * H)
        b[H:2 * H] = 50.0
        p = const_params(np.zeros((2, 4 * H)), np.zeros((H, 4 * H)), b)
        c_prev = np.array([0.3, -1.2, 2.5])
        _, c = lstm_cell(np.array([1.0, -2.0]), np.array([0.1, 0.2, 0.3]), c_prev, p)
        np.testing.assert_allclose(c.data, c_prev, atol=1e-9)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        W, U, b = rng.normal(size=(3, 12)), rng.normal(size=(3, 12)), rng.normal(size=12)
        x, h, c = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
        hh, cc = lstm_cell(x, h, c, const_params(W, U, b))
        ho, co = scalar_lstm_cell(x, h, c, W.tolist(), U.tolist(), b.tolist())
        np.testing.assert_allclose(hh.data, ho, rtol=0, atol=1e-13)
        np.testing.assert_allclose(cc.data, co, rtol=0, atol=1e-13)

    def test_dimension_mismatch(self):
        p = init_lstm(3, 2, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            lstm_cell(np.zeros(4), np.zeros(2), np.zeros(2), p)


class TestLSTMSequence:
    def _setup(self, seed=0, B=4, Tn=6, D=3, H=2):
        rng = np.random.default_rng(seed)
        p = init_lstm(D, H, rng)
        p.b.data[:] = rng.normal(size=4 * H)
        lengths = rng.integers(1, Tn + 1, size=B)
        lengths[0] = Tn
        x = rng.normal(size=(B, Tn, D))
        mask = (np.arange(Tn)[None, :] < lengths[:, None]).astype(float)
        h0, c0 = rng.normal(size=(B, H)), rng.normal(size=(B, H))
        return p, x, mask, lengths, h0, c0

    def test_matches_cell_loop_at_true_length(self):
        p, x, mask, lengths, h0, c0 = self._setup()
        H = p.hidden
        y = lstm_sequence(x, mask, p, h0, c0).data
        for b, n in enumerate(lengths):
            h, c = h0[b], c0[b]
            for t in range(n):
                h, c = lstm_cell(x[b, t], h, c, p)
                np.testing.assert_allclose(y[b, t, :H], h.data, atol=1e-14)
                np.testing.assert_allclose(y[b, t, H:], c.data, atol=1e-14)
            # state frozen after the last valid frame
            np.testing.assert_array_equal(y[b, -1, :H], y[b, n - 1, :H])

    def test_padding_content_is_irrelevant(self):
        p, x, mask, *_ = self._setup(seed=3)
        y1 = lstm_sequence(x, mask, p).data
        x2 = np.where(mask[..., None] > 0, x, 1e3)
        y2 = lstm_sequence(x2, mask, p).data
        np.testing.assert_array_equal(y1, y2)

    def test_gradients_match_finite_differences(self):
        p, x, mask, lengths, h0, c0 = self._setup(seed=5)
        xt, h0t, c0t = Tensor(x, True), Tensor(h0, True), Tensor(c0, True)
        w = np.random.default_rng(1).normal(size=(x.shape[0], x.shape[1], 2 * p.hidden))
        fn = lambda: T.tsum(lstm_sequence(xt, mask, p, h0t, c0t) * w)
        assert gradient_check(fn, p.tensors() + [xt, h0t, c0t], 1e-5) < 1e-6

    def test_non_prefix_mask_rejected(self):
        p, x, mask, *_ = self._setup()
        bad = mask.copy()
        bad[0, 0] = 0
        with pytest.raises(ConfigurationError):
            lstm_sequence(x, bad, p)


class TestStackedSequences:
    def test_each_slice_matches_single_run(self):
        rng = np.random.default_rng(11)
        B, Tn, D, H = 5, 7, 3, 2
        ps = [init_lstm(D, H, rng) for _ in range(3)]
        xs = [rng.normal(size=(B, Tn, D)) for _ in range(3)]
        lengths = np.array([7, 2, 5, 1, 7])
        mask = (np.arange(Tn)[None, :] < lengths[:, None]).astype(float)
        y = lstm_sequences(xs, mask, ps).data
        for s in range(3):
            np.testing.assert_allclose(y[s], lstm_sequence(xs[s], mask, ps[s]).data, atol=1e-14)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        B, Tn, D, H = 3, 4, 2, 3
        ps = [init_lstm(D, H, rng) for _ in range(2)]
        xs = [Tensor(rng.normal(size=(B, Tn, D)), True) for _ in range(2)]
        mask = (np.arange(Tn)[None, :] < np.array([4, 1, 3])[:, None]).astype(float)
        w = rng.normal(size=(2, B, Tn, 2 * H))
        fn = lambda: T.tsum(lstm_sequences(xs, mask, ps) * w)
        assert gradient_check(fn, ps[0].tensors() + ps[1].tensors() + xs, 1e-5) < 1e-6

    def test_mismatched_inputs_rejected(self):
        rng = np.random.default_rng(0)
        ps = [init_lstm(3, 2, rng), init_lstm(3, 2, rng)]
        with pytest.raises(ConfigurationError):
            lstm_sequences([np.zeros((2, 4, 3)), np.zeros((2, 5, 3))], np.ones((2, 4)), ps)
        with pytest.raises(ConfigurationError):
            lstm_sequences([np.zeros((2, 4, 3))], np.ones((2, 4)), ps)


class TestLSTMStep:
    def test_matches_cell(self):
        rng = np.random.default_rng(9)
        p = init_lstm(3, 4, rng)
        p.b.data[:] = rng.normal(size=16)
        x, h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        y = lstm_step(x, np.concatenate([h, c], axis=1), p).data
        hh, cc = lstm_cell(x, h, c, p)
        np.testing.assert_allclose(y[:, :4], hh.data, atol=1e-15)
        np.testing.assert_allclose(y[:, 4:], cc.data, atol=1e-15)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(10)
        p = init_lstm(3, 2, rng)
        x, state = Tensor(rng.normal(size=(2, 3)), True), Tensor(rng.normal(size=(2, 4)), True)
        w = rng.normal(size=(2, 4))
        fn = lambda: T.tsum(lstm_step(x, state, p) * w)
        assert gradient_check(fn, p.tensors() + [x, state], 1e-5) < 1e-6

    def test_dimension_mismatch(self):
        p = init_lstm(3, 2, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            lstm_step(np.zeros((1, 3)), np.zeros((1, 3)), p)


class TestBackward:
    def test_sum_gives_ones(self):
        p = Tensor(np.arange(6.0).reshape(2, 3), True)
        with Tape() as tape:
            loss = T.tsum(p)
        g = backward(tape, loss)
        np.testing.assert_array_equal(g[p], np.ones((2, 3)))

    def test_self_cosine_distance_has_zero_gradient(self):
        p = Tensor([0.3, -1.0, 2.0], True)
        with Tape() as tape:
            loss = cosine_distance(p, p)
        np.testing.assert_allclose(backward(tape, loss)[p], 0.0, atol=1e-15)

    def test_unreachable_parameter_gets_zero(self):
        a, b = Tensor([1.0, 2.0], True), Tensor([[3.0]], True)
        with Tape() as tape:
            loss = T.tsum(a * a)
        g = backward(tape, loss, [a, b])
        np.testing.assert_array_equal(g[b], np.zeros((1, 1)))
        np.testing.assert_array_equal(g[a], [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        a = Tensor([1.0, 2.0], True)
        with Tape() as tape:
            y = a * 2.0
        with pytest.raises(UsageError):
            backward(tape, y)

    def test_no_tape_records_nothing(self):
        a = Tensor([1.0], True)
        y = a * 3.0
        assert not y.requires_grad

    def test_nonfinite_forward_is_an_error(self):
        with pytest.raises(NumericalError):
            T.exp(Tensor([1000.0]))

    def test_rearranging_a_nonfinite_leaf_is_an_error(self):
        bad = Tensor([[1.0, np.nan]])
        for op in (lambda: bad[0], lambda: T.reshape(bad, (2,)), lambda: T.concat([bad, bad], 0)):
            with pytest.raises(NumericalError):
                op()

    def test_affine_matches_matmul_plus_bias(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
        np.testing.assert_allclose(T.affine(x, w, b).data, x @ w + b, atol=1e-15)
        with pytest.raises(UsageError):
            T.affine(x, w, np.zeros(4))

    def test_cosine_similarity_broadcasts(self):
        p = np.array([[1.0, 0.0], [0.0, 2.0]])
        np.testing.assert_allclose(T.cosine_similarity(p, [3.0, 0.0]).data, [1.0, 0.0], atol=1e-15)
        with pytest.raises(ValidationError):
            T.cosine_similarity(p, [0.0, 0.0])

    def test_relu_subgradient_at_zero(self):
        a = Tensor([0.0, 1.0, -1.0], True)
        with Tape() as tape:
            loss = T.tsum(T.relu(a))
        np.testing.assert_array_equal(backward(tape, loss)[a], [0.0, 1.0, 0.0])


def _random_graph(draw_ops, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)), True)
    b = Tensor(rng.normal(size=(4, 2)), True)
    c = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)), True)

    def fn():
        x = a
        for op in draw_ops:
            if op == "matmul":
                x = T.tanh(x @ b) @ b.T
            elif op == "mul":
                x = x * c
            elif op == "div":
                x = x / (c + 0.5)
            elif op == "sigmoid":
                x = T.sigmoid(x)
            elif op == "softmax":
                x = T.softmax(x, axis=-1)
            elif op == "exp":
                x = T.exp(T.tanh(x))
            elif op == "concat":
                x = T.concat([x, x * 2.0], axis=-1)[:, :4]
            elif op == "sqrt":
                x = T.sqrt(x * x + 1.0)
            elif op == "index":
                x = x[np.array([2, 0, 1, 1])][:3]
            elif op == "log":
                x = T.log(T.sigmoid(x))
            elif op == "affine":
                x = T.affine(T.affine(x, b, b[0]), b.T, a[1])
            elif op == "cosine":
                x = x * T.cosine_similarity(x, a[0])[:, None]
        return T.tsum(x * x)

    return fn, [a, b, c]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["matmul", "mul", "div", "sigmoid", "softmax", "exp",
                                 "concat", "sqrt", "index", "log", "affine", "cosine"]), min_size=1, max_size=5),
       st.integers(0, 10_000))
def test_random_graphs_match_finite_differences(ops, seed):
    fn, params = _random_graph(ops, seed)
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss, params)
    # central differences carry ~|loss| * 1e-11 absolute round-off at step 1e-5;
    # coordinates below that floor cannot be judged by a relative criterion
    floor = 1e-5 * max(1.0, abs(float(loss.data)))
    assume(all(np.all((g == 0) | (np.abs(g) > floor)) for g in grads.values()))
    assert gradient_check(fn, params, 1e-5) < 1e-4


class TestAdam:
    def test_zero_gradient_is_identity(self):
        p = Tensor([1.0, -2.0], True)
        adam_update([p], [np.zeros(2)], AdamState())
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_minus_lr_sign(self):
        p = Tensor([1.0], True)
        st_ = AdamState(lr=1e-4)
        adam_update([p], [np.array([0.5])], st_)
        assert st_.t == 1
        np.testing.assert_allclose(p.data, [1.0 - 1e-4 * 0.5 / (0.5 + 1e-8)], rtol=0, atol=1e-15)
        assert abs(p.data[0] - 0.9999) < 1e-8

    def test_matches_scalar_recurrence(self):
        # minimize (w - 3)^2 for three steps, lr 0.1
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        w_ref, m, v = 0.0, 0.0, 0.0
        for t in range(1, 4):
            g = 2.0 * (w_ref - 3.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w_ref -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        p = Tensor([0.0], True)
        state = AdamState(lr=lr)
        for _ in range(3):
            adam_update([p], [2.0 * (p.data - 3.0)], state)
        assert state.t == 3
        assert abs(p.data[0] - w_ref) < 1e-12

    def test_shape_mismatch(self):
        p = Tensor([1.0, 2.0], True)
        with pytest.raises(ConfigurationError):
            adam_update([p], [np.zeros(3)], AdamState())


class TestGradientCheck:
    def test_quadratic(self):
        p = Tensor([3.0], True)
        assert gradient_check(lambda: T.tsum(p * p), [p], 1e-5) < 1e-8

    def test_nondeterministic_rejected(self):
        p = Tensor([3.0], True)
        rng = np.random.default_rng(0)
        with pytest.raises(UsageError):
            gradient_check(lambda: T.tsum(p * rng.normal()), [p], 1e-5)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        named = {"a.W": rng.normal(size=(3, 4)), "scalar": np.array(np.pi), "é-name": rng.normal(size=5)}
        save_tensors(tmp_path / "m.ckpt", named)
        back = load_tensors(tmp_path / "m.ckpt")
        assert list(back) == list(named)
        for k in named:
            assert back[k].tobytes() == np.asarray(named[k], dtype="<f8").tobytes()

    def test_layout(self, tmp_path):
        save_tensors(tmp_path / "m.ckpt", {"w": np.array([[1.0, 2.0]])})
        raw = (tmp_path / "m.ckpt").read_bytes()
        expected = (b"MVAWE1" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w"
                    + struct.pack("<I", 2) + struct.pack("<2I", 1, 2) + struct.pack("<2d", 1.0, 2.0))
        assert raw == expected

    def test_truncated_file(self, tmp_path):
        save_tensors(tmp_path / "m.ckpt", {"w": np.ones(10)})
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(raw[:-8])
        with pytest.raises(DataError):
            load_tensors(tmp_path / "m.ckpt")
