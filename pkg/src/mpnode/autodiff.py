"""Reverse-mode differentiation by taping numpy computations.

A ``Tape`` records every primitive applied to traced values (``Var``); the
recorded program is then walked backwards, accumulating vector-Jacobian
products. The same objective function can be evaluated on plain numpy arrays
(no tape, no overhead) or on a ``Var`` to obtain exact gradients: every
primitive computes its value with the identical numpy call in both modes, so
the taped forward value matches the plain evaluation bit for bit.

Memory grows linearly with the number of recorded operations (one record per
primitive, each holding references to the arrays it needs for its backward
pass). Unrolled integrator stages therefore cost O(steps) memory, which is
the intended trade: penalty windows keep rollouts short.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import IndexOutOfRange, UnsupportedPrimitive

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tape:
    """Linear record of primitives applied to traced values."""

    __slots__ = ("records", "n_vars")

    def __init__(self):
        self.records = []
        self.n_vars = 0

    def leaf(self, value):
        """Wrap an array as a traced input of this tape."""
        return self._make(np.asarray(value, dtype=float))

    def _make(self, value):
        var = Var(self, value, self.n_vars)
        self.n_vars += 1
        return var

    def record(self, value, parents):
        """Append one primitive: ``parents`` is a sequence of (Var, vjp).

        Each vjp maps the adjoint of the output onto the adjoint
        contribution of that parent. Exposed so that model code can register
        fused operations with analytic backward rules.
        """
        out = self._make(np.asarray(value))
        self.records.append((out.index, tuple((p.index, fn) for p, fn in parents)))
        return out

    def backward(self, output, inputs):
        """Adjoints of ``output`` (scalar) with respect to ``inputs``.

        Accumulation order is fixed by the tape, so results are
        deterministic. Returns one array per requested input; zeros if the
        input never influenced the output.
        """
        adjoint = [None] * self.n_vars
        adjoint[output.index] = np.ones_like(output.value)
        for out_idx, parents in reversed(self.records):
            g = adjoint[out_idx]
            if g is None:
                continue
            for parent_idx, vjp in parents:
                contrib = vjp(g)
                prev = adjoint[parent_idx]
                adjoint[parent_idx] = contrib if prev is None else prev + contrib
        results = []
        for var in inputs:
            g = adjoint[var.index]
            results.append(np.zeros_like(var.value) if g is None else np.asarray(g))
        return results


class Var:
    """A traced array. Supports the arithmetic the toolkit's models use."""

    __slots__ = ("tape", "value", "index")

    def __init__(self, tape, value, index):
        self.tape = tape
        self.value = value
        self.index = index

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        # route numpy ufuncs through the taped primitives
        if method != "__call__" or kwargs:
            raise UnsupportedPrimitive(f"ufunc {ufunc.__name__}.{method} is not taped")
        handler = _UFUNC_DISPATCH.get(ufunc)
        if handler is None:
            raise UnsupportedPrimitive(f"ufunc {ufunc.__name__} is not taped")
        return handler(*inputs)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __float__(self):
        raise UnsupportedPrimitive(
            "cannot convert a traced value to a plain float; use .value to detach"
        )

    def __bool__(self):
        raise UnsupportedPrimitive(
            "truth value of a traced array would detach it from the tape"
        )

    # comparisons detach by design: branching is not differentiable anyway
    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return array_sum(self, axis=axis)


def value_of(x):
    """Underlying ndarray/scalar of ``x`` whether traced or plain."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- primitive definitions ---------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.add(av, bv)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        ashape = np.shape(av)
        parents.append((a, lambda g: _unbroadcast(g, ashape)))
    if isinstance(b, Var):
        bshape = np.shape(bv)
        parents.append((b, lambda g: _unbroadcast(g, bshape)))
    return tape.record(out, parents)


def subtract(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.subtract(av, bv)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        ashape = np.shape(av)
        parents.append((a, lambda g: _unbroadcast(g, ashape)))
    if isinstance(b, Var):
        bshape = np.shape(bv)
        parents.append((b, lambda g: _unbroadcast(-g, bshape)))
    return tape.record(out, parents)


def multiply(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.multiply(av, bv)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        ashape = np.shape(av)
        parents.append((a, lambda g: _unbroadcast(g * bv, ashape)))
    if isinstance(b, Var):
        bshape = np.shape(bv)
        parents.append((b, lambda g: _unbroadcast(g * av, bshape)))
    return tape.record(out, parents)


def divide(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.divide(av, bv)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        ashape = np.shape(av)
        parents.append((a, lambda g: _unbroadcast(g / bv, ashape)))
    if isinstance(b, Var):
        bshape = np.shape(bv)
        parents.append((b, lambda g: _unbroadcast(-g * av / (bv * bv), bshape)))
    return tape.record(out, parents)


def negative(a):
    if not isinstance(a, Var):
        return np.negative(a)
    return a.tape.record(np.negative(a.value), [(a, lambda g: -g)])


def power(a, exponent):
    if isinstance(exponent, Var):
        raise UnsupportedPrimitive("traced exponents are not supported")
    if not isinstance(a, Var):
        return np.power(a, exponent)
    av = a.value
    out = np.power(av, exponent)
    return a.tape.record(
        out, [(a, lambda g: g * exponent * np.power(av, exponent - 1))]
    )


def square(a):
    return power(a, 2)


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    if tape is None:
        return out
    parents = []
    if av.ndim == 1 and bv.ndim == 1:  # dot product
        if isinstance(a, Var):
            parents.append((a, lambda g: g * bv))
        if isinstance(b, Var):
            parents.append((b, lambda g: g * av))
    elif av.ndim == 1:  # (n,) @ (n, m)
        if isinstance(a, Var):
            parents.append((a, lambda g: bv @ g))
        if isinstance(b, Var):
            parents.append((b, lambda g: np.outer(av, g)))
    elif bv.ndim == 1:  # (m, n) @ (n,)
        if isinstance(a, Var):
            parents.append((a, lambda g: np.outer(g, bv)))
        if isinstance(b, Var):
            parents.append((b, lambda g: av.T @ g))
    elif av.ndim == 2 and bv.ndim == 2:
        if isinstance(a, Var):
            parents.append((a, lambda g: g @ bv.T))
        if isinstance(b, Var):
            parents.append((b, lambda g: av.T @ g))
    else:
        raise UnsupportedPrimitive("matmul with ndim > 2 is not supported")
    return tape.record(out, parents)


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(a)
    out = np.tanh(a.value)
    return a.tape.record(out, [(a, lambda g: g * (1.0 - out * out))])


def gelu(a):
    """Gaussian-CDF form: x * Phi(x), with the analytic derivative."""
    av = value_of(a)
    cdf = 0.5 * (1.0 + erf(av * _INV_SQRT2))
    out = av * cdf
    if not isinstance(a, Var):
        return out
    pdf = np.exp(-0.5 * av * av) * _INV_SQRT2PI
    return a.tape.record(out, [(a, lambda g: g * (cdf + av * pdf))])


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    out = np.exp(a.value)
    return a.tape.record(out, [(a, lambda g: g * out)])


def log(a):
    if not isinstance(a, Var):
        return np.log(a)
    av = a.value
    return a.tape.record(np.log(av), [(a, lambda g: g / av)])


def sqrt(a):
    if not isinstance(a, Var):
        return np.sqrt(a)
    out = np.sqrt(a.value)
    return a.tape.record(out, [(a, lambda g: g / (2.0 * out))])


def absolute(a):
    if not isinstance(a, Var):
        return np.abs(a)
    av = a.value
    return a.tape.record(np.abs(av), [(a, lambda g: g * np.sign(av))])


def relu(a):
    """max(x, 0); the subgradient at 0 is taken as 0."""
    if not isinstance(a, Var):
        return np.maximum(a, 0.0)
    av = a.value
    mask = av > 0.0
    return a.tape.record(np.maximum(av, 0.0), [(a, lambda g: g * mask)])


def maximum(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.maximum(a, b)
    if isinstance(b, Var):
        raise UnsupportedPrimitive("maximum supports a traced first argument only")
    av = a.value
    mask = av > b
    return a.tape.record(np.maximum(av, b), [(a, lambda g: g * mask)])


def array_sum(a, axis=None):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis)
    av = a.value
    out = np.sum(av, axis=axis)
    shape = av.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape)
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return a.tape.record(out, [(a, vjp)])


def mean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return divide(array_sum(a, axis=axis), float(n))


def take(a, key):
    if not isinstance(a, Var):
        return a[key]
    av = a.value
    out = av[key]
    shape = av.shape

    def vjp(g):
        dest = np.zeros(shape)
        np.add.at(dest, key, g)
        return dest

    return a.tape.record(out, [(a, vjp)])


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.value.shape
    return a.tape.record(
        np.reshape(a.value, shape), [(a, lambda g: np.reshape(g, old))]
    )


def concatenate(parts, axis=0):
    tape = _tape_of(*parts)
    values = [np.asarray(value_of(p)) for p in parts]
    out = np.concatenate(values, axis=axis)
    if tape is None:
        return out
    parents = []
    offset = 0
    for part, val in zip(parts, values):
        size = val.shape[axis]
        if isinstance(part, Var):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(offset, offset + size)
            sl = tuple(sl)
            parents.append((part, lambda g, sl=sl: g[sl]))
        offset += size
    return tape.record(out, parents)


def stack(parts, axis=0):
    tape = _tape_of(*parts)
    values = [np.asarray(value_of(p)) for p in parts]
    out = np.stack(values, axis=axis)
    if tape is None:
        return out
    parents = []
    for i, part in enumerate(parts):
        if isinstance(part, Var):
            parents.append((part, lambda g, i=i: np.take(g, i, axis=axis)))
    return tape.record(out, parents)


def where_nonnegative(cond_values, a, b):
    """Select ``a`` where ``cond_values >= 0`` else ``b`` (cond is plain)."""
    cond = np.asarray(cond_values) >= 0.0
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.where(cond, av, bv)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        ashape = np.shape(av)
        parents.append((a, lambda g: _unbroadcast(g * cond, ashape)))
    if isinstance(b, Var):
        bshape = np.shape(bv)
        parents.append((b, lambda g: _unbroadcast(g * ~cond, bshape)))
    return tape.record(out, parents)


def primitive(value, parents):
    """Record a fused operation with caller-supplied backward rules.

    ``value`` is the already-computed plain result; ``parents`` is a sequence
    of (Var, vjp) pairs. Model right-hand sides with cheap analytic Jacobians
    use this to collapse many scalar records into one.
    """
    tape = _tape_of(*[p for p, _ in parents])
    if tape is None:
        raise UnsupportedPrimitive("primitive() requires at least one traced parent")
    return tape.record(value, [(p, fn) for p, fn in parents if isinstance(p, Var)])


_UFUNC_DISPATCH = {
    np.add: add,
    np.subtract: subtract,
    np.multiply: multiply,
    np.divide: divide,
    np.true_divide: divide,
    np.negative: negative,
    np.matmul: matmul,
    np.tanh: tanh,
    np.exp: exp,
    np.log: log,
    np.sqrt: sqrt,
    np.abs: absolute,
    np.absolute: absolute,
    np.maximum: maximum,
    np.square: square,
}


# --- parameter flattening -----------------------------------------------------

@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector plus a (name, offset, shape) layout.

    Offsets must tile [0, len) contiguously, in order, with no gaps.
    """

    values: np.ndarray
    layout: tuple = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, "values", values)
        layout = tuple(
            (str(name), int(offset), tuple(int(s) for s in shape))
            for name, offset, shape in self.layout
        )
        if not layout:
            layout = (("params", 0, (values.size,)),)
        object.__setattr__(self, "layout", layout)
        expected = 0
        for name, offset, shape in layout:
            if offset != expected:
                raise ValueError(f"layout entry {name!r} is not contiguous")
            expected += int(np.prod(shape, dtype=int)) if shape else 1
        if expected != values.size:
            raise ValueError(
                f"layout covers {expected} entries but vector has {values.size}"
            )

    @classmethod
    def from_arrays(cls, named_arrays):
        """Build from an ordered sequence of (name, array) pairs."""
        layout = []
        chunks = []
        offset = 0
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=float)
            layout.append((name, offset, arr.shape))
            chunks.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, tuple(layout))

    def __len__(self):
        return self.values.size

    def view(self, name):
        """Plain ndarray view of one named block."""
        for n, offset, shape in self.layout:
            if n == name:
                size = int(np.prod(shape, dtype=int)) if shape else 1
                return self.values[offset : offset + size].reshape(shape)
        raise KeyError(name)

    def block_slice(self, name):
        for n, offset, shape in self.layout:
            if n == name:
                size = int(np.prod(shape, dtype=int)) if shape else 1
                return slice(offset, offset + size)
        raise KeyError(name)

    def replace(self, new_values):
        return ParamVector(np.asarray(new_values, dtype=float), self.layout)

    def unpack(self, source=None):
        """Dict of named blocks sliced out of ``source`` (traced or plain).

        With no source the vector's own values are unpacked.
        """
        p = self.values if source is None else source
        blocks = {}
        for name, offset, shape in self.layout:
            size = int(np.prod(shape, dtype=int)) if shape else 1
            chunk = p[offset : offset + size]
            blocks[name] = reshape(chunk, shape) if shape else chunk
        return blocks


@dataclass
class GradResult:
    """Objective value plus its gradient; ``overflow`` flags non-finite output."""

    value: float
    gradient: np.ndarray
    overflow: bool = False


def _scalar_value(out):
    v = np.asarray(value_of(out))
    if v.size != 1:
        raise UnsupportedPrimitive(
            f"objective must return a scalar, got shape {v.shape}"
        )
    return float(v.reshape(()))


def grad(objective, params):
    """Reverse-mode gradient of a scalar objective at ``params``.

    The objective receives the flat traced vector and must build its result
    from supported primitives. Non-finite values or gradients are reported
    through ``GradResult.overflow`` rather than raised, so exploding-gradient
    studies can log magnitudes.
    """
    tape = Tape()
    root = tape.leaf(params.values)
    out = objective(root)
    if not isinstance(out, Var):
        return GradResult(_scalar_value(out), np.zeros_like(params.values))
    value = _scalar_value(out)
    (gradient,) = tape.backward(out, [root])
    gradient = gradient.reshape(params.values.shape)
    overflow = not (np.isfinite(value) and np.isfinite(gradient).all())
    return GradResult(value, gradient, overflow)


def finite_diff_grad(objective, params, epsilon):
    """Central-difference gradient; the independent check for ``grad``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = params.values
    g = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + epsilon
        f_plus = _scalar_value(objective(bumped))
        bumped[i] = base[i] - epsilon
        f_minus = _scalar_value(objective(bumped))
        g[i] = (f_plus - f_minus) / (2.0 * epsilon)
    return g


def grad_wrt_subset(objective, params, mask):
    """Gradient restricted to the indices in ``mask``; others are zero."""
    indices = np.asarray(list(mask), dtype=int)
    n = params.values.size
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexOutOfRange(
            f"mask indices must lie in [0, {n}), got range "
            f"[{indices.min()}, {indices.max()}]"
        )
    full = grad(objective, params)
    restricted = np.zeros_like(full.gradient)
    if indices.size:
        restricted[indices] = full.gradient[indices]
    return GradResult(full.value, restricted, full.overflow)
