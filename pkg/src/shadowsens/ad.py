"""Forward-mode derivative propagation for numpy computations.

A :class:`Dual` carries a value together with one or more directional
derivatives ("tangents") and overloads numpy's ufunc/function protocols so
that ordinary model code -- written with `+`, `*`, `@`, `np.sqrt`,
`np.where`, `np.concatenate`, ... -- propagates exact derivatives by the
chain rule, one operation at a time.

Values are scalars or 1-D float arrays; tangents are stored in a trailing
axis, so a state of shape (d,) with k simultaneous directions has
``dot.shape == (d, k)``.  Propagating several directions at once amortizes
numpy call overhead, which is how full Jacobians are assembled in a single
evaluation of the step map.
"""

import numpy as np

_HANDLED_UNARY = {}
_HANDLED_BINARY = {}


def _asval(x):
    return np.asarray(x, dtype=np.float64)


class Dual:
    """Value plus k directional derivatives (trailing tangent axis)."""

    __slots__ = ("val", "dot")
    __array_priority__ = 1000.0

    def __init__(self, val, dot):
        self.val = _asval(val)
        self.dot = _asval(dot)
        if self.dot.shape[:-1] != self.val.shape:
            raise ValueError(
                f"tangent shape {self.dot.shape} incompatible with value "
                f"shape {self.val.shape}; expected {self.val.shape + ('k',)}"
            )

    @property
    def ndirs(self):
        return self.dot.shape[-1]

    # -- python operator protocol ------------------------------------
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return Dual(-self.val, -self.dot)

    def __pos__(self):
        return self

    def __pow__(self, p):
        return _pow(self, p)

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __abs__(self):
        return _abs(self)

    def __getitem__(self, idx):
        # indexing acts on value axes only; the tangent axis is preserved
        return Dual(self.val[idx], self.dot[idx])

    def __len__(self):
        return len(self.val)

    # comparisons inspect values only (used for branch selection)
    def __lt__(self, other):
        return self.val < _peel(other)

    def __le__(self, other):
        return self.val <= _peel(other)

    def __gt__(self, other):
        return self.val > _peel(other)

    def __ge__(self, other):
        return self.val >= _peel(other)

    def __repr__(self):
        return f"Dual(val={self.val!r}, ndirs={self.ndirs})"

    def sum(self, axis=None):
        return _reduce_sum(self, axis)

    # -- numpy dispatch ----------------------------------------------
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if kwargs.get("out") is not None:
            return NotImplemented
        if method == "reduce" and ufunc is np.add:
            return _reduce_sum(inputs[0], kwargs.get("axis", None))
        if method != "__call__":
            return NotImplemented
        if ufunc in _HANDLED_UNARY and len(inputs) == 1:
            return _HANDLED_UNARY[ufunc](inputs[0])
        if ufunc in _HANDLED_BINARY and len(inputs) == 2:
            return _HANDLED_BINARY[ufunc](*inputs)
        return NotImplemented

    def __array_function__(self, func, types, args, kwargs):
        if func is np.where:
            return where(*args, **kwargs)
        if func is np.concatenate:
            return concatenate(*args, **kwargs)
        if func is np.stack:
            return stack(*args, **kwargs)
        if func is np.sum:
            return _reduce_sum(args[0], kwargs.get("axis", None))
        if func is np.linalg.norm and len(args) == 1 and not kwargs:
            return _sqrt(_reduce_sum(_mul(args[0], args[0]), None))
        return NotImplemented


def _peel(x):
    return x.val if isinstance(x, Dual) else x


def _parts(x):
    """Split an operand into (value, tangent-or-None)."""
    if isinstance(x, Dual):
        return x.val, x.dot
    return _asval(x), None


def _vexp(val):
    """Value broadcast against a trailing tangent axis."""
    return val[..., None]


def _add(a, b):
    av, ad = _parts(a)
    bv, bd = _parts(b)
    if ad is None:
        dot = np.broadcast_to(bd, np.broadcast(av, bv).shape + bd.shape[-1:])
    elif bd is None:
        dot = np.broadcast_to(ad, np.broadcast(av, bv).shape + ad.shape[-1:])
    else:
        dot = ad + bd
    return Dual(av + bv, dot)


def _sub(a, b):
    av, ad = _parts(a)
    bv, bd = _parts(b)
    if ad is None:
        dot = np.broadcast_to(-bd, np.broadcast(av, bv).shape + bd.shape[-1:])
    elif bd is None:
        dot = np.broadcast_to(ad, np.broadcast(av, bv).shape + ad.shape[-1:])
    else:
        dot = ad - bd
    return Dual(av - bv, dot)


def _mul(a, b):
    av, ad = _parts(a)
    bv, bd = _parts(b)
    if ad is None:
        dot = _vexp(av) * bd
    elif bd is None:
        dot = ad * _vexp(bv)
    else:
        dot = ad * _vexp(bv) + _vexp(av) * bd
    return Dual(av * bv, dot)


def _div(a, b):
    av, ad = _parts(a)
    bv, bd = _parts(b)
    val = av / bv
    if bd is None:
        dot = ad / _vexp(bv)
    elif ad is None:
        dot = -_vexp(val / bv) * bd
    else:
        dot = (ad - _vexp(val) * bd) / _vexp(bv)
    return Dual(val, dot)


def _pow(a, p):
    if isinstance(p, Dual):
        raise TypeError("dual exponents are not supported")
    av, ad = _parts(a)
    return Dual(av**p, _vexp(p * av ** (p - 1)) * ad)


def _sqrt(a):
    av, ad = _parts(a)
    val = np.sqrt(av)
    return Dual(val, ad / _vexp(2.0 * val))


def _abs(a):
    av, ad = _parts(a)
    return Dual(np.abs(av), _vexp(np.sign(av)) * ad)


def _sin(a):
    av, ad = _parts(a)
    return Dual(np.sin(av), _vexp(np.cos(av)) * ad)


def _cos(a):
    av, ad = _parts(a)
    return Dual(np.cos(av), _vexp(-np.sin(av)) * ad)


def _exp(a):
    av, ad = _parts(a)
    val = np.exp(av)
    return Dual(val, _vexp(val) * ad)


def _log(a):
    av, ad = _parts(a)
    return Dual(np.log(av), ad / _vexp(av))


def _matmul(a, b):
    av, ad = _parts(a)
    bv, bd = _parts(b)
    val = av @ bv
    if ad is None:
        # constant matrix (or vector) times dual: matmul broadcasts over
        # the trailing tangent axis of the dual operand
        dot = av @ bd
    elif bd is None:
        if bv.ndim == 1:
            # ad: (d, k), bv: (d,) -> (k,)
            dot = bv @ ad
        else:
            # ad: (d, k), bv: (d, m) -> (m, k)
            dot = bv.T @ ad
    else:
        if av.ndim != 1 or bv.ndim != 1:
            raise TypeError("dual @ dual supported for vectors only")
        dot = bv @ ad + av @ bd
    return Dual(val, dot)


def _reduce_sum(a, axis):
    av, ad = _parts(a)
    if axis is None:
        axes = tuple(range(av.ndim))
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % av.ndim for ax in axes)
    return Dual(av.sum(axis=axes), ad.sum(axis=axes))


_HANDLED_UNARY.update(
    {
        np.negative: lambda a: -a,
        np.positive: lambda a: a,
        np.sqrt: _sqrt,
        np.absolute: _abs,
        np.sin: _sin,
        np.cos: _cos,
        np.exp: _exp,
        np.log: _log,
    }
)
_HANDLED_BINARY.update(
    {
        np.add: _add,
        np.subtract: _sub,
        np.multiply: _mul,
        np.true_divide: _div,
        np.power: _pow,
        np.matmul: _matmul,
    }
)


def seed(val, dot):
    """Attach tangent directions to a value.

    ``dot`` must have shape ``val.shape + (k,)`` for k directions.
    """
    return Dual(val, dot)


def value(x):
    """Strip any tangents, returning the plain value."""
    return x.val if isinstance(x, Dual) else _asval(x)


def tangent(x, ndirs=None):
    """Tangents of x; zeros of the right shape if x carries none."""
    if isinstance(x, Dual):
        return x.dot
    if ndirs is None:
        raise ValueError("ndirs required for a plain operand")
    return np.zeros(_asval(x).shape + (ndirs,))


def where(cond, a, b):
    cond = np.asarray(_peel(cond))
    av, ad = _parts(a)
    bv, bd = _parts(b)
    val = np.where(cond, av, bv)
    k = ad.shape[-1] if ad is not None else bd.shape[-1]
    if ad is None:
        ad = np.zeros(av.shape + (k,))
    if bd is None:
        bd = np.zeros(bv.shape + (k,))
    return Dual(val, np.where(cond[..., None], ad, bd))


def concatenate(parts, axis=0):
    if not any(isinstance(p, Dual) for p in parts):
        return np.concatenate(parts, axis=axis)
    k = next(p.ndirs for p in parts if isinstance(p, Dual))
    vals = [_peel(p) for p in parts]
    dots = [tangent(p, k) for p in parts]
    return Dual(np.concatenate(vals, axis=axis), np.concatenate(dots, axis=axis))


def stack(parts, axis=0):
    if not any(isinstance(p, Dual) for p in parts):
        return np.stack(parts, axis=axis)
    if axis != 0:
        raise ValueError("dual stack supports axis=0 only")
    k = next(p.ndirs for p in parts if isinstance(p, Dual))
    vals = [_peel(p) for p in parts]
    dots = [tangent(p, k) for p in parts]
    return Dual(np.stack(vals, axis=0), np.stack(dots, axis=0))
