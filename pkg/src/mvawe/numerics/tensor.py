"""Dense float64 tensors with a tape-based reverse-mode gradient.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, which is already a topological order; :func:`backward`
replays the tape in reverse. Outside a tape nothing is recorded, so
evaluation code simply runs without one.
"""

import math
import threading

import numpy as np

from mvawe.errors import NumericalError, UsageError, ValidationError

_local = threading.local()
_count_lock = threading.Lock()
_reduce = np.add.reduce  # a sum is finite iff every term is (barring overflow, also an error)


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


_open_tapes = 0  # tapes entered in any thread; lets untaped code skip the per-thread lookup


def active_tape():
    if not _open_tapes:
        return None
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations (one per thread)."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _open_tapes
        with _count_lock:
            _open_tapes += 1
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        global _open_tapes
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
            with _count_lock:
                _open_tapes -= 1
        return False

    def __len__(self):
        return len(self.nodes)

    def leaves(self):
        """Tensors requiring grad that were consumed but not produced here."""
        produced = {id(out) for out, _, _ in self.nodes}
        seen = {}
        for _, inputs, _ in self.nodes:
            for t in inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())


class Tensor:
    # _finite marks op outputs, whose values were verified finite when produced
    __slots__ = ("data", "requires_grad", "grad", "name", "_finite")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._finite = False

    @classmethod
    def _wrap(cls, data, requires_grad, finite=False):
        t = object.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._finite = finite
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def _apply(data, inputs, backward_fn, rearranges=False):
    """Wrap an op result and record it on the active tape when needed.

    Ops that only move values around (``rearranges``) skip the finiteness
    scan when all their inputs were already checked.
    """
    if not (rearranges and all(t._finite for t in inputs)) and not math.isfinite(_reduce(data, None)):
        raise NumericalError("non-finite value produced in forward pass")
    tape = active_tape() if _open_tapes else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs, True)
    if needs:
        tape.nodes.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _apply(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _apply(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _apply(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericalError("division by zero")
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _apply(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _apply(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    """``a @ b`` where ``b`` is a matrix and ``a`` has one or more leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise UsageError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        if ad.ndim == 1:
            gb = np.outer(ad, g)
        else:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _apply(ad @ bd, (a, b), backward)


def affine(x, w, b):
    """``x @ w + b`` as one op; ``w`` is a matrix and ``b`` a vector."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise UsageError(f"affine shape mismatch: {x.shape} @ {w.shape} + {b.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd.T, xd.reshape(-1, xd.shape[-1]).T @ g2, g2.sum(axis=0)

    return _apply(xd @ wd + b.data, (x, w, b), backward)


def cosine_similarity(p, q):
    """Cosine of the angle between ``p`` and ``q`` along the last axis, with broadcasting."""
    p, q = as_tensor(p), as_tensor(q)
    pd, qd = p.data, q.data
    npn = np.sqrt((pd * pd).sum(axis=-1))
    nqn = np.sqrt((qd * qd).sum(axis=-1))
    if not (npn.all() and nqn.all()):
        raise ValidationError("cosine undefined for a zero vector")
    denom = npn * nqn
    cos = (pd * qd).sum(axis=-1) / denom

    def backward(g):
        gc = (g / denom)[..., None]
        c = (g * cos)[..., None]
        gp = gc * qd - c * pd / (npn * npn)[..., None]
        gq = gc * pd - c * qd / (nqn * nqn)[..., None]
        return _unbroadcast(gp, pd.shape), _unbroadcast(gq, qd.shape)

    return _apply(cos, (p, q), backward)


# -- reductions and shape ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), True)


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _apply(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), True)


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape
    fancy = _is_fancy(idx)

    def backward(g):
        z = np.zeros(shape)
        if fancy:
            np.add.at(z, idx, g)
        else:
            z[idx] = g
        return (z,)

    return _apply(np.array(a.data[idx]), (a,), backward, True)


def concat(tensors, axis=-1):
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _apply(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                  lambda g: tuple(np.split(g, splits, axis=axis)), True)


def stack(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    n = len(tensors)
    return _apply(np.stack([t.data for t in tensors], axis=axis), tensors,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), True)


# -- nonlinearities ---------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _apply(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _apply(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _apply(e, (a,), lambda g: (g * e,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of non-positive value")
    d = a.data
    return _apply(np.log(d), (a,), lambda g: (g / d,))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericalError("sqrt of negative value")
    r = np.sqrt(a.data)
    return _apply(r, (a,), lambda g: (g * 0.5 / r,))


def relu(a):
    """max(a, 0); the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    pos = a.data > 0
    return _apply(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def clamp_min(a, floor):
    """max(a, floor) with gradient passing only where a > floor."""
    a = as_tensor(a)
    keep = a.data > floor
    return _apply(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _apply(s, (a,), backward)


def dropout(a, rate, rng):
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    a = as_tensor(a)
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor._wrap(keep, False))


# -- gradient replay --------------------------------------------------------

def backward(tape, loss, params=None):
    """Accumulate d(loss)/d(param) for ``params`` by replaying ``tape`` in reverse.

    With ``params`` omitted every leaf tensor on the tape requiring grad is
    used. Returns a dict keyed by tensor; each tensor's ``.grad`` is set too.
    Parameters the loss does not depend on get an all-zero gradient.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is None:
        params = tape.leaves()
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            prev = grads.get(k)
            grads[k] = gi if prev is None else prev + gi
    result = {}
    for p in params:
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
        p.grad = g
        result[p] = g
    return result
