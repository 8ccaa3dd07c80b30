"""LSTM primitives.

Gate layout in the stacked weight matrices is (input, forget, candidate,
output), each block ``hidden`` columns wide::

    z = x W + h U + b
    i, f, o = sigmoid(z_i), sigmoid(z_f), sigmoid(z_o);  g = tanh(z_g)
    c' = f * c + i * g
    h' = o * tanh(c')
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from mvawe.errors import ConfigurationError
from mvawe.numerics import tensor as T
from mvawe.numerics.tensor import Tensor, _apply


@dataclass
class LSTMParams:
    W: Tensor  # (input, 4H)
    U: Tensor  # (H, 4H)
    b: Tensor  # (4H,)

    @property
    def input_size(self):
        return self.W.shape[0]

    @property
    def hidden(self):
        return self.U.shape[0]

    def tensors(self):
        return [self.W, self.U, self.b]

    def check(self):
        H = self.hidden
        if self.U.shape != (H, 4 * H) or self.W.shape[1] != 4 * H or self.b.shape != (4 * H,):
            raise ConfigurationError(
                f"inconsistent LSTM parameter shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}")


def init_lstm(input_size, hidden, rng, forget_bias=1.0):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases except the forget gate."""
    bw = 1.0 / np.sqrt(input_size)
    bu = 1.0 / np.sqrt(hidden)
    W = rng.uniform(-bw, bw, size=(input_size, 4 * hidden))
    U = rng.uniform(-bu, bu, size=(hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = forget_bias
    return LSTMParams(Tensor(W, requires_grad=True), Tensor(U, requires_grad=True),
                      Tensor(b, requires_grad=True))


def lstm_cell(x_t, h_prev, c_prev, params):
    """One LSTM step built from primitive ops. Returns ``(h, c)``."""
    x_t, h_prev, c_prev = T.as_tensor(x_t), T.as_tensor(h_prev), T.as_tensor(c_prev)
    params.check()
    H = params.hidden
    if x_t.shape[-1] != params.input_size or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ConfigurationError(
            f"lstm_cell dims x{x_t.shape} h{h_prev.shape} c{c_prev.shape} "
            f"vs input {params.input_size}, hidden {H}")
    z = x_t @ params.W + h_prev @ params.U + params.b
    i = T.sigmoid(z[..., :H])
    f = T.sigmoid(z[..., H:2 * H])
    g = T.tanh(z[..., 2 * H:3 * H])
    o = T.sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    return h, c


@lru_cache(maxsize=None)
def _gate_affine(H):
    # one tanh yields every gate: sigmoid(z) = (tanh(z/2) + 1) / 2
    s = np.full(4 * H, 0.5)
    s[2 * H:3 * H] = 1.0
    return s, np.where(s == 0.5, 0.5, 0.0)


def _gates(z, H):
    s, shift = _gate_affine(H)
    a = np.tanh(z * s)
    a *= s
    a += shift
    return a


def lstm_sequence(x, mask, params, h0=None, c0=None):
    """Run an LSTM over a left-aligned padded batch as a single fused op.

    ``x`` is (B, T, D); ``mask`` is a (B, T) 0/1 array marking valid frames,
    which must form a prefix of each row. After a sequence ends its state is
    carried over unchanged, so position T-1 always holds each sequence's
    state after its last valid frame, and padding never touches valid
    states or gradients.

    Returns a (B, T, 2H) tensor holding ``[h_t, c_t]`` for every step.
    """
    x = T.as_tensor(x)
    B = x.shape[0]
    H = params.hidden
    h0 = T.as_tensor(np.zeros((B, H)) if h0 is None else h0)
    c0 = T.as_tensor(np.zeros((B, H)) if c0 is None else c0)
    if h0.shape != (B, H) or c0.shape != (B, H):
        raise ConfigurationError(f"initial state shapes {h0.shape}, {c0.shape} != {(B, H)}")
    out = lstm_sequences([x], mask, [params], T.reshape(h0, (1, B, H)), T.reshape(c0, (1, B, H)))
    return T.reshape(out, out.shape[1:])


def _check_mask(mask, B, Tn):
    mask = np.asarray(mask, dtype=np.float64).reshape(B, Tn)
    lengths = mask.sum(axis=1).astype(np.int64)
    if not np.array_equal(mask, (np.arange(Tn)[None, :] < lengths[:, None])):
        raise ConfigurationError("mask must mark a prefix of each sequence")
    return lengths


def lstm_sequences(xs, mask, params_list, h0=None, c0=None):
    """Run S independent LSTMs that share one mask in lockstep, as one fused op.

    ``xs`` holds S inputs of shape (B, T, D_s) with equal D_s; ``h0``/``c0``
    are optional (S, B, H) initial states. Returns an (S, B, T, 2H) tensor;
    slice s equals ``lstm_sequence(xs[s], mask, params_list[s])``. Used to
    run both directions of a bidirectional layer with one time loop.
    """
    xs = [T.as_tensor(x) for x in xs]
    S = len(xs)
    if S == 0 or len(params_list) != S:
        raise ConfigurationError("need one parameter set per input")
    for p in params_list:
        p.check()
    H = params_list[0].hidden
    B, Tn, D = xs[0].shape
    for x, p in zip(xs, params_list):
        if x.shape != (B, Tn, D) or p.input_size != D or p.hidden != H:
            raise ConfigurationError(
                f"lstm input {x.shape} vs parameters (input {p.input_size}, hidden {p.hidden}); "
                f"expected {(B, Tn, D)} and hidden {H}")
    lengths = _check_mask(mask, B, Tn)
    zeros = np.zeros((S, B, H))
    h0 = T.as_tensor(zeros if h0 is None else h0)
    c0 = T.as_tensor(zeros if c0 is None else c0)
    if h0.shape != (S, B, H) or c0.shape != (S, B, H):
        raise ConfigurationError(f"initial state shapes {h0.shape}, {c0.shape} != {(S, B, H)}")

    # rows sorted by decreasing length: the active rows at step t are a prefix
    full = bool(np.all(lengths == Tn))
    order = np.arange(B) if full else np.argsort(-lengths, kind="stable")
    inv = np.argsort(order)
    active = np.full(Tn, B) if full else (lengths[order][None, :] > np.arange(Tn)[:, None]).sum(axis=1)
    X = np.stack([x.data for x in xs])                               # (S, B, T, D)
    Wd = np.stack([p.W.data for p in params_list])                    # (S, D, 4H)
    Ud = np.stack([p.U.data for p in params_list])                    # (S, H, 4H)
    bd = np.stack([p.b.data for p in params_list])                    # (S, 4H)
    scale, shift = _gate_affine(H)
    # gate pre-activations are pre-multiplied by the tanh argument scale
    xw = np.matmul(X.reshape(S, B * Tn, D), Wd * scale).reshape(S, B, Tn, 4 * H)
    xw += (bd * scale)[:, None, None, :]
    if not full:
        xw = xw[:, order]
    Us = Ud * scale
    record = T.active_tape() is not None
    out = np.empty((S, B, Tn, 2 * H))
    gates, tanh_c, h_prev, c_prev = [], [], [], []
    hc = np.concatenate([h0.data, c0.data], axis=-1)[:, order]
    h, c = hc[..., :H], hc[..., H:]
    for t in range(Tn):
        n = active[t]
        if n:
            hn, cp = (h, c) if n == B else (h[:, :n], c[:, :n])
            a = np.tanh(xw[:, :n, t] + np.matmul(hn, Us))
            a *= scale
            a += shift
            if record:
                h_prev.append(hn.copy())
                c_prev.append(cp.copy())
            cn = a[..., H:2 * H] * cp
            cn += a[..., :H] * a[..., 2 * H:3 * H]
            tc = np.tanh(cn)
            cp[...] = cn
            np.multiply(a[..., 3 * H:], tc, out=hn)
            if record:
                gates.append(a)
                tanh_c.append(tc)
        out[:, :, t] = hc
    if not full:
        out = out[:, inv]

    def backward(g):
        if not full:
            g = g[:, order]
        dxw = np.zeros((S, B, Tn, 4 * H))
        dU = np.zeros_like(Ud)
        dh = np.zeros((S, B, H))
        dc = np.zeros((S, B, H))
        UT = Ud.transpose(0, 2, 1)
        for t in range(Tn - 1, -1, -1):
            dh += g[:, :, t, :H]
            dc += g[:, :, t, H:]
            n = active[t]
            if not n:
                continue
            a = gates[t]
            i, f, gg, o = a[..., :H], a[..., H:2 * H], a[..., 2 * H:3 * H], a[..., 3 * H:]
            tc = tanh_c[t]
            dhn = dh[:, :n]
            dcn = dc[:, :n] + dhn * o * (1.0 - tc * tc)
            dz = dxw[:, :n, t]
            dz[..., :H] = dcn * gg * i * (1.0 - i)
            dz[..., H:2 * H] = dcn * c_prev[t] * f * (1.0 - f)
            dz[..., 2 * H:3 * H] = dcn * i * (1.0 - gg * gg)
            dz[..., 3 * H:] = dhn * tc * o * (1.0 - o)
            dU += np.matmul(h_prev[t].transpose(0, 2, 1), dz)
            dh[:, :n] = np.matmul(dz, UT)
            dc[:, :n] = dcn * f
        if not full:
            dxw = dxw[:, inv]
            dh, dc = dh[:, inv], dc[:, inv]
        flat = dxw.reshape(S, B * Tn, 4 * H)
        dW = np.matmul(X.reshape(S, B * Tn, D).transpose(0, 2, 1), flat)
        db = flat.sum(axis=1)
        dX = np.matmul(flat, Wd.transpose(0, 2, 1)).reshape(S, B, Tn, D)
        grads = [dX[s] for s in range(S)]
        for s in range(S):
            grads += [dW[s], dU[s], db[s]]
        return tuple(grads) + (dh, dc)

    inputs = tuple(xs) + tuple(t for p in params_list for t in (p.W, p.U, p.b)) + (h0, c0)
    return _apply(out, inputs, backward)


def lstm_step(x, state, params):
    """One fused LSTM step on (B, D) input and a (B, 2H) ``[h, c]`` state.

    Returns the next ``[h', c']`` state; equivalent to :func:`lstm_cell`
    but recorded as a single op.
    """
    x, state = T.as_tensor(x), T.as_tensor(state)
    params.check()
    H = params.hidden
    B = x.shape[0]
    if x.shape != (B, params.input_size) or state.shape != (B, 2 * H):
        raise ConfigurationError(
            f"lstm_step dims x{x.shape} state{state.shape} "
            f"vs input {params.input_size}, hidden {H}")
    xd, sd = x.data, state.data
    hd, cd = sd[:, :H], sd[:, H:]
    Wd, Ud = params.W.data, params.U.data
    a = _gates(xd @ Wd + hd @ Ud + params.b.data, H)
    i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
    out = np.empty((B, 2 * H))
    cn = out[:, H:]
    np.multiply(f, cd, out=cn)
    cn += i * g
    tc = np.tanh(cn)
    np.multiply(o, tc, out=out[:, :H])

    def backward(grad):
        dh, dc = grad[:, :H], grad[:, H:]
        dcn = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([dcn * g * i * (1.0 - i), dcn * cd * f * (1.0 - f),
                             dcn * i * (1.0 - g * g), dh * tc * o * (1.0 - o)], axis=1)
        dstate = np.concatenate([dz @ Ud.T, dcn * f], axis=1)
        return (dz @ Wd.T, dstate, xd.T @ dz, hd.T @ dz, dz.sum(axis=0))

    return _apply(out, (x, state, params.W, params.U, params.b), backward)
