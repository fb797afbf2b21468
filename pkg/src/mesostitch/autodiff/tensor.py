"""Tensor type and the tape that records primitives for reverse-mode differentiation."""

from contextlib import contextmanager

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NotScalarLoss(ValueError):
    pass


_DEFAULT_DTYPE = [np.float32]
_TAPES = []


def get_default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with."""
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


def recording():
    return bool(_TAPES)


@contextmanager
def no_grad():
    """Suspend recording for the enclosed block."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


class Tensor:
    """A numpy array with an optional gradient slot.

    Leaves are tensors created directly; tensors produced by primitives while a
    :class:`Tape` is active are graph nodes and do not keep ``.grad``.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._is_node = False

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    # -- operators ------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False, dtype=None):
        return tsum(self, axis=axis, keepdims=keepdims, dtype=dtype)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives evaluated inside it (on inputs that
    require gradients) are appended, and :meth:`backward` replays their
    adjoints in reverse order.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, adjoint):
        self.nodes.append((out, parents, adjoint))

    def backward(self, loss, leaves=()):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Leaves listed in ``leaves`` that no path reaches get a zero gradient.
        """
        if loss.size != 1:
            raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, adjoint in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, adjoint(g)):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.dtype)
                if pg.shape != p.shape:
                    raise ShapeMismatch(f"adjoint shape {pg.shape} != {p.shape}")
                if p._is_node:
                    if id(p) in grads:
                        grads[id(p)] = grads[id(p)] + pg
                    else:
                        grads[id(p)] = pg
                elif p.grad is None:
                    p.grad = pg.copy()
                else:
                    p.grad = p.grad + pg
        if not loss._is_node and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        self.nodes.clear()


def backward(tape, loss, leaves=()):
    tape.backward(loss, leaves)
    return [leaf.grad for leaf in leaves]


# -- recording helpers ---------------------------------------------------------

def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        arr = np.asarray(x)
        dtype = arr.dtype if arr.dtype.kind == "f" else get_default_dtype()
    return Tensor(x, dtype=dtype)


def _result_dtype(*xs):
    dts = [x.dtype for x in xs if isinstance(x, Tensor)]
    return np.result_type(*dts) if dts else get_default_dtype()


def make_node(data, parents, adjoint):
    """Wrap ``data`` as a tensor and record ``adjoint`` if any parent needs grads."""
    out = Tensor(data, dtype=np.asarray(data).dtype)
    if _TAPES and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._is_node = True
        _TAPES[-1].record(out, parents, adjoint)
    return out


def _data(x, dtype):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(x):
    return x.shape if isinstance(x, Tensor) else np.shape(x)


def _binary(a, b, fwd, da, db):
    dt = _result_dtype(a, b)
    ad, bd = _data(a, dt), _data(b, dt)
    try:
        out = fwd(ad, bd)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sa, sb = _shape(a), _shape(b)

    def adjoint(g):
        return (unbroadcast(da(g, ad, bd), sa) if isinstance(a, Tensor) else None,
                unbroadcast(db(g, ad, bd), sb) if isinstance(b, Tensor) else None)

    return make_node(np.asarray(out, dtype=dt), (a, b), adjoint)


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    x = a.data
    p = float(exponent)

    def adjoint(g):
        return (g * p * x ** (p - 1),)

    return make_node(x ** p, (a,), adjoint)


def matmul(a, b):
    dt = _result_dtype(a, b)
    ad, bd = _data(a, dt), _data(b, dt)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeMismatch(f"matmul {ad.shape} @ {bd.shape}")

    def adjoint(g):
        return g @ bd.T, ad.T @ g

    return make_node(ad @ bd, (a, b), adjoint)


def tsum(a, axis=None, keepdims=False, dtype=None):
    """Sum; ``dtype=np.float64`` accumulates (and returns) in double precision."""
    x = a.data

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_node(np.asarray(x.sum(axis=axis, keepdims=keepdims, dtype=dtype)), (a,), adjoint)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    if isinstance(index, Tensor):
        index = index.data
    x = a.data

    def adjoint(g):
        out = np.zeros_like(x)
        np.add.at(out, index, g)
        return (out,)

    return make_node(np.asarray(x[index]), (a,), adjoint)


def stop_gradient(t):
    """Return ``t``'s values with every adjoint path through this edge cut."""
    if isinstance(t, Tensor):
        return Tensor(t.data, dtype=t.dtype)
    return Tensor(t)
