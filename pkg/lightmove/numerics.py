"""Dense tensors with a recording tape for reverse-mode differentiation.

Operations executed while a `Tape` is active (``with Tape() as tape:``) and
touching at least one tensor with ``requires_grad`` are recorded together with
their local gradient rule. `backward` walks the tape in reverse and returns a
`Gradients` map keyed by the leaf tensors.

Outside a tape the same functions simply compute, which is how inference and
finite-difference checks run.
"""
from __future__ import annotations

import threading

import numpy as np
from scipy import special

from .lib import DimensionError, shape_str, sha256_arrays

DEFAULT_DTYPE = np.float64

_local = threading.local()


def _tape_stack():
    """Per-thread stack of active tapes."""
    stack = getattr(_local, 'tapes', None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tensor(object):
    __slots__ = ('data', 'requires_grad', 'name', '__weakref__')

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == 'f' \
                else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise DimensionError('item() needs a single value, got shape {}'.format(
                shape_str(self.shape)))
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        label = ' {}'.format(self.name) if self.name else ''
        return 'Tensor{}({}, requires_grad={})'.format(label, shape_str(self.shape),
                                                      self.requires_grad)


def tensor(values, requires_grad=False, dtype=DEFAULT_DTYPE, name=None):
    return Tensor(np.array(values, dtype=dtype), requires_grad=requires_grad, name=name)


def constant(values, dtype=None):
    return Tensor(np.asarray(values), dtype=dtype)


class Tape(object):
    """Ordered record of operations. Single owner, one `backward` per tape."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, rule):
        self.nodes.append((inputs, out, rule))


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _result(data, inputs, rule):
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, rule)
    return out


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise DimensionError('{}: shapes {} and {} differ'.format(
            op, shape_str(a.shape), shape_str(b.shape)))


def _check_2d(op, *ts):
    for t in ts:
        if t.data.ndim != 2:
            raise DimensionError('{}: expected a matrix, got shape {}'.format(
                op, shape_str(t.shape)))


# linear algebra

def matmul(a, b):
    _check_2d('matmul', a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError('matmul: inner dimensions of {} and {} do not match'.format(
            shape_str(a.shape), shape_str(b.shape)))
    A, B = a.data, b.data
    return _result(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a):
    _check_2d('transpose', a)
    return _result(a.data.T, (a,), lambda g: (g.T,))


def add_row(x, b):
    """x (m×n) plus the row vector b (n) on every row."""
    _check_2d('add_row', x)
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError('add_row: bias {} does not fit rows of {}'.format(
            shape_str(b.shape), shape_str(x.shape)))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def linear(x, W, b=None):
    """x·Wᵀ + b, with W stored as out×in."""
    y = matmul(x, transpose(W))
    if b is not None:
        y = add_row(y, b)
    return y


def batched_matvec(W, h):
    """Row i of the result is reshape(W[i], d×d) · h[i]."""
    _check_2d('batched_matvec', W, h)
    n, d = h.shape
    if W.shape != (n, d * d):
        raise DimensionError('batched_matvec: matrices {} do not fit states {}'.format(
            shape_str(W.shape), shape_str(h.shape)))
    Wm = W.data.reshape(n, d, d)
    H = h.data

    def rule(g):
        dW = np.einsum('ni,nj->nij', g, H).reshape(n, d * d)
        dh = np.einsum('nij,ni->nj', Wm, g)
        return dW, dh
    return _result(np.einsum('nij,nj->ni', Wm, H), (W, h), rule)


# elementwise

def sigmoid(x):
    y = special.expit(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def hadamard(a, b):
    _check_same('hadamard', a, b)
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def add(a, b):
    _check_same('add', a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same('sub', a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(x, c):
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def add_const(x, c):
    return _result(x.data + c, (x,), lambda g: (g,))


def log(x):
    X = x.data
    return _result(np.log(X), (x,), lambda g: (g / X,))


ELEMENTWISE = {
    'sigmoid': sigmoid,
    'tanh': tanh,
    'hadamard': hadamard,
    'add': add,
    'sub': sub,
    'scale': scale,
}


def elementwise(x, kind, other=None):
    """Dispatch by name; `other` is the second operand or, for scale, the factor."""
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError('unknown elementwise kind {!r}'.format(kind))
    if kind in ('sigmoid', 'tanh'):
        return fn(x)
    return fn(x, other)


def row_softmax(x):
    _check_2d('row_softmax', x)
    y = special.softmax(x.data, axis=1)

    def rule(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)
    return _result(y, (x,), rule)


def row_log_softmax(x):
    """log(row_softmax(x)) computed as x - logsumexp(x); finite for any finite x."""
    _check_2d('row_log_softmax', x)
    y = x.data - special.logsumexp(x.data, axis=1, keepdims=True)

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)
    return _result(y, (x,), rule)


# structure

def concat(a, b, axis='rows'):
    _check_2d('concat', a, b)
    ax = {'rows': 0, 'cols': 1}[axis]
    off = 1 - ax
    if a.shape[off] != b.shape[off]:
        raise DimensionError('concat along {}: {} and {} differ off-axis'.format(
            axis, shape_str(a.shape), shape_str(b.shape)))
    k = a.shape[ax]

    def rule(g):
        if ax == 0:
            return g[:k], g[k:]
        return g[:, :k], g[:, k:]
    return _result(np.concatenate([a.data, b.data], axis=ax), (a, b), rule)


def slice_rows(x, start, stop=None):
    _check_2d('slice_rows', x)
    rows = x.shape[0]
    start, stop, _ = slice(start, stop).indices(rows)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)
    return _result(x.data[start:stop], (x,), rule)


def tile_rows(v, m):
    """Stack a vector (or 1×n row) m times."""
    row = v.data.reshape(1, -1)
    shape = v.shape
    return _result(np.repeat(row, m, axis=0), (v,),
                   lambda g: (g.sum(axis=0).reshape(shape),))


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def embedding(table, indices):
    """Rows of `table` picked by integer `indices`; gradient scatter-adds back."""
    _check_2d('embedding', table)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        bad = idx[(idx < 0) | (idx >= rows)][0]
        raise IndexError('embedding index {} outside table of {} rows'.format(bad, rows))
    shape = table.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)
    return _result(table.data[idx], (table,), rule)


def take(x, rows, cols):
    """Vector of x[rows[k], cols[k]]."""
    _check_2d('take', x)
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (r, c), g)
        return (full,)
    return _result(x.data[r, c], (x,), rule)


# reductions

def sum(x):
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean(x):
    shape = x.shape
    n = max(x.size, 1)
    return _result(np.asarray(x.data.sum() / n), (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def square_sum(x):
    X = x.data
    return _result(np.asarray((X * X).sum()), (x,), lambda g: (2.0 * g * X,))


# regularization

def dropout(x, rate, training, rng):
    """Inverted dropout: survivors scaled by 1/(1-rate), identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError('dropout rate must be in [0, 1), got {}'.format(rate))
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# differentiation

class Gradients(dict):
    """Leaf tensor -> gradient array. Missing leaves have zero gradient."""

    def of(self, t):
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


def backward(loss, tape):
    if loss.size != 1:
        raise DimensionError('backward needs a scalar loss, got shape {}'.format(
            shape_str(loss.shape)))
    if tape.consumed:
        raise RuntimeError('backward already ran on this tape')
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    produced = set()
    for inputs, out, rule in reversed(tape.nodes):
        produced.add(id(out))
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gt in zip(inputs, rule(g)):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = gt if key not in grads else grads[key] + gt
            leaves[key] = t

    result = Gradients()
    if not tape.nodes and loss.requires_grad:
        result[loss] = grads[id(loss)]
    for key, t in leaves.items():
        if key not in produced and key in grads:
            result[t] = grads[key]
    return result


class ParamStore(object):
    """Named, ordered collection of trainable tensors."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = dtype
        self._tensors = {}
        self._decay = {}

    def add(self, name, values, decay=True):
        if name in self._tensors:
            raise KeyError('parameter {!r} already exists'.format(name))
        t = Tensor(np.array(values, dtype=self.dtype), requires_grad=True, name=name)
        self._tensors[name] = t
        self._decay[name] = decay
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def decays(self, name):
        return self._decay[name]

    def decayed(self):
        return [t for name, t in self._tensors.items() if self._decay[name]]

    def num_scalars(self):
        return int(np.sum([t.size for t in self._tensors.values()], dtype=np.int64))

    def gradients(self, grads):
        return {name: grads.of(t) for name, t in self._tensors.items()}

    def snapshot(self):
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def restore(self, snapshot):
        for name, values in snapshot.items():
            t = self._tensors[name]
            if t.shape != values.shape:
                raise DimensionError('restore {}: {} vs stored {}'.format(
                    name, shape_str(t.shape), shape_str(values.shape)))
            t.data[...] = values

    def clone(self):
        other = ParamStore(self.dtype)
        for name, t in self._tensors.items():
            other.add(name, t.data.copy(), decay=self._decay[name])
        return other

    def digest(self):
        return sha256_arrays((name, t.data) for name, t in self._tensors.items())

    def __deepcopy__(self, memo):
        return self.clone()

    def __repr__(self):
        return 'ParamStore({} tensors, {} scalars)'.format(len(self), self.num_scalars())


def finite_difference_check(f, params, eps=1e-5, num_samples=None, rng=None, names=None):
    """Max relative error between tape gradients and central differences.

    `f` takes no arguments and returns a scalar Tensor computed from `params`;
    it must be deterministic. With `num_samples` set, that many coordinates
    are drawn per tensor (using `rng`), otherwise every coordinate is perturbed.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    with Tape() as tape:
        out = f()
    grads = backward(out, tape)

    worst = 0.0
    for name in names or params.names():
        p = params[name]
        analytic = grads.of(p).reshape(-1)
        flat = p.data.reshape(-1)
        if num_samples is None or num_samples >= flat.size:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=num_samples, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            worst = max(worst, err)
    return worst
