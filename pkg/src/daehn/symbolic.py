"""Symbolic expressions for constraint systems.

Constraints are built programmatically from small ASTs.  Leaves name the
quantities of the projection problem: inputs (coordinates), outputs,
algebraized derivative variables, multipliers/slacks, learnable physical
parameters, backbone predictions and neighbor evaluations (the latter two are
constants during a solve).  Evaluation is payload-generic: bindings may hold
floats, batched numpy rows, or tape refs, so the same expression serves plain
evaluation, batched Newton solves and traced (differentiable) solves.

Symbolic differentiation produces a new expression per leaf kind with
constant folding; no further simplification is attempted.
"""

from __future__ import annotations

import numpy as np

from .autodiff import duals


class Expr:
    __slots__ = ()

    def __add__(self, o):
        return add(self, _lift(o))

    def __radd__(self, o):
        return add(_lift(o), self)

    def __sub__(self, o):
        return sub(self, _lift(o))

    def __rsub__(self, o):
        return sub(_lift(o), self)

    def __mul__(self, o):
        return mul(self, _lift(o))

    def __rmul__(self, o):
        return mul(_lift(o), self)

    def __truediv__(self, o):
        return div(self, _lift(o))

    def __rtruediv__(self, o):
        return div(_lift(o), self)

    def __neg__(self):
        return mul(Const(-1.0), self)

    def __pow__(self, n):
        return powi(self, n)


def _lift(x):
    if isinstance(x, Expr):
        return x
    return Const(float(x))


class Const(Expr):
    __slots__ = ("v",)

    def __init__(self, v):
        self.v = float(v)

    def __repr__(self):
        return f"{self.v:g}"


class _Leaf(Expr):
    __slots__ = ("key",)
    kind = "?"

    def __repr__(self):
        return f"{self.kind}{self.key[1:]}"


class Input(_Leaf):
    """Coordinate x_i (time counts as the last axis when present)."""

    kind = "x"
    __slots__ = ("i",)

    def __init__(self, i):
        self.i = int(i)
        self.key = ("x", self.i)


class Output(_Leaf):
    kind = "y"
    __slots__ = ("p",)

    def __init__(self, p):
        self.p = int(p)
        self.key = ("y", self.p)


class Deriv(_Leaf):
    """Algebraized derivative variable, index into a DerivRegistry."""

    kind = "d"
    __slots__ = ("q",)

    def __init__(self, q):
        self.q = int(q)
        self.key = ("d", self.q)


class Mult(_Leaf):
    """Multiplier/slack, index into the flattened multiplier vector."""

    kind = "m"
    __slots__ = ("k",)

    def __init__(self, k):
        self.k = int(k)
        self.key = ("m", self.k)


class Param(_Leaf):
    """Learnable physical parameter, referenced by name."""

    kind = "p"
    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name
        self.key = ("p", name)


class YHat(_Leaf):
    """Backbone prediction for output p; constant during a solve."""

    kind = "yhat"
    __slots__ = ("p",)

    def __init__(self, p):
        self.p = int(p)
        self.key = ("yhat", self.p)


class Neighbor(_Leaf):
    """Backbone evaluation at the axis-``i`` offset point; constant during a
    solve."""

    kind = "nb"
    __slots__ = ("axis", "p")

    def __init__(self, axis, p):
        self.axis = int(axis)
        self.p = int(p)
        self.key = ("nb", self.axis, self.p)


class _Bin(Expr):
    __slots__ = ("a", "b")

    def __init__(self, a, b):
        self.a = a
        self.b = b


class Add(_Bin):
    pass


class Sub(_Bin):
    pass


class Mul(_Bin):
    pass


class Div(_Bin):
    pass


class Pow(Expr):
    __slots__ = ("a", "n")

    def __init__(self, a, n):
        self.a = a
        self.n = int(n)


class _Un(Expr):
    __slots__ = ("a",)

    def __init__(self, a):
        self.a = a


class Exp(_Un):
    pass


class Sin(_Un):
    pass


class Cos(_Un):
    pass


class Sqrt(_Un):
    pass


class Tanh(_Un):
    pass


# ------------------------------------------------------------- constructors
def add(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.v + b.v)
    if isinstance(a, Const) and a.v == 0.0:
        return b
    if isinstance(b, Const) and b.v == 0.0:
        return a
    return Add(a, b)


def sub(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.v - b.v)
    if isinstance(b, Const) and b.v == 0.0:
        return a
    return Sub(a, b)


def mul(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.v * b.v)
    if isinstance(a, Const):
        if a.v == 0.0:
            return Const(0.0)
        if a.v == 1.0:
            return b
    if isinstance(b, Const):
        if b.v == 0.0:
            return Const(0.0)
        if b.v == 1.0:
            return a
    return Mul(a, b)


def div(a, b):
    if isinstance(a, Const) and a.v == 0.0:
        return Const(0.0)
    if isinstance(b, Const):
        if b.v == 1.0:
            return a
        if isinstance(a, Const):
            return Const(a.v / b.v)
    return Div(a, b)


def powi(a, n):
    n = int(n)
    if n == 0:
        return Const(1.0)
    if n == 1:
        return a
    if isinstance(a, Const):
        return Const(a.v**n)
    return Pow(a, n)


def exp(a):
    return Const(np.exp(a.v)) if isinstance(a, Const) else Exp(a)


def sin(a):
    return Const(np.sin(a.v)) if isinstance(a, Const) else Sin(a)


def cos(a):
    return Const(np.cos(a.v)) if isinstance(a, Const) else Cos(a)


def sqrt(a):
    return Const(np.sqrt(a.v)) if isinstance(a, Const) else Sqrt(a)


def tanh(a):
    return Const(np.tanh(a.v)) if isinstance(a, Const) else Tanh(a)


def fb_expr(a: Expr, b: Expr) -> Expr:
    """Fischer-Burmeister residual a + b - sqrt(a^2 + b^2).

    The assembled row carries a 1e-32 shift under the root: it perturbs the
    residual by at most 1e-16 (below any solver tolerance) and gives the
    Newton Jacobian the standard subgradient value at the origin instead of
    0/0.
    """
    return sub(add(a, b), Sqrt(add(add(Mul(a, a), Mul(b, b)), Const(1e-32))))


def fischer_burmeister(a, b):
    """phi(a, b) = a + b - sqrt(a^2 + b^2); zero iff a >= 0, b >= 0, a*b = 0."""
    return a + b - duals.sqrt(a * a + b * b)


# ------------------------------------------------------------------ bindings
class Bindings:
    """Leaf values for evaluation.

    Vector entries may be scalars, (B,) arrays, or tape refs; ``neighbors``
    is indexed [axis][output].
    """

    __slots__ = ("inputs", "outputs", "derivs", "mults", "y_hat", "neighbors", "params")

    def __init__(
        self,
        inputs=None,
        outputs=None,
        derivs=None,
        mults=None,
        y_hat=None,
        neighbors=None,
        params=None,
    ):
        self.inputs = inputs
        self.outputs = outputs
        self.derivs = derivs
        self.mults = mults
        self.y_hat = y_hat
        self.neighbors = neighbors
        self.params = params or {}


class EvalError(ValueError):
    """A leaf had no binding, or arithmetic left the domain."""


def evaluate(expr: Expr, b: Bindings, memo=None):
    """Evaluate with full leaf bindings; shared subtrees are computed once."""
    if memo is None:
        memo = {}
    return _ev(expr, b, memo)


def _fetch(vec, idx, what):
    if vec is None:
        raise EvalError(f"no binding for {what}")
    try:
        return vec[idx]
    except (IndexError, KeyError):
        raise EvalError(f"no binding for {what}") from None


def _ev(e, b, memo):
    key = id(e)
    hit = memo.get(key)
    if hit is not None:
        return hit
    t = type(e)
    if t is Const:
        r = e.v
    elif t is Input:
        r = _fetch(b.inputs, e.i, f"input {e.i}")
    elif t is Output:
        r = _fetch(b.outputs, e.p, f"output {e.p}")
    elif t is Deriv:
        r = _fetch(b.derivs, e.q, f"derivative variable {e.q}")
    elif t is Mult:
        r = _fetch(b.mults, e.k, f"multiplier {e.k}")
    elif t is YHat:
        r = _fetch(b.y_hat, e.p, f"backbone output {e.p}")
    elif t is Neighbor:
        if b.neighbors is None:
            raise EvalError(f"no binding for neighbor ({e.axis},{e.p})")
        r = b.neighbors[e.axis][e.p]
    elif t is Param:
        r = _fetch(b.params, e.name, f"parameter {e.name!r}")
    elif t is Add:
        r = _ev(e.a, b, memo) + _ev(e.b, b, memo)
    elif t is Sub:
        r = _ev(e.a, b, memo) - _ev(e.b, b, memo)
    elif t is Mul:
        r = _ev(e.a, b, memo) * _ev(e.b, b, memo)
    elif t is Div:
        r = _ev(e.a, b, memo) / _ev(e.b, b, memo)
    elif t is Pow:
        r = _ev(e.a, b, memo) ** e.n
    elif t is Exp:
        r = duals.exp(_ev(e.a, b, memo))
    elif t is Sin:
        r = duals.sin(_ev(e.a, b, memo))
    elif t is Cos:
        r = duals.cos(_ev(e.a, b, memo))
    elif t is Sqrt:
        r = duals.sqrt(_ev(e.a, b, memo))
    elif t is Tanh:
        r = duals.tanh(_ev(e.a, b, memo))
    else:  # pragma: no cover
        raise AssertionError(f"unhandled node {t}")
    memo[key] = r
    return r


# -------------------------------------------------------------- differentiate
def differentiate(expr: Expr, key) -> Expr:
    """Symbolic partial derivative with respect to the leaf identified by
    ``key`` (a leaf instance or its ``.key`` tuple)."""
    if isinstance(key, _Leaf):
        key = key.key
    return _diff(expr, key)


def _diff(e, key):
    t = type(e)
    if t is Const:
        return Const(0.0)
    if isinstance(e, _Leaf):
        return Const(1.0) if e.key == key else Const(0.0)
    if t is Add:
        return add(_diff(e.a, key), _diff(e.b, key))
    if t is Sub:
        return sub(_diff(e.a, key), _diff(e.b, key))
    if t is Mul:
        return add(mul(_diff(e.a, key), e.b), mul(e.a, _diff(e.b, key)))
    if t is Div:
        da, db = _diff(e.a, key), _diff(e.b, key)
        num = sub(mul(da, e.b), mul(e.a, db))
        return div(num, mul(e.b, e.b))
    if t is Pow:
        return mul(mul(Const(e.n), powi(e.a, e.n - 1)), _diff(e.a, key))
    if t is Exp:
        return mul(e, _diff(e.a, key))
    if t is Sin:
        return mul(cos(e.a), _diff(e.a, key))
    if t is Cos:
        return mul(Const(-1.0), mul(sin(e.a), _diff(e.a, key)))
    if t is Sqrt:
        return div(_diff(e.a, key), mul(Const(2.0), e))
    if t is Tanh:
        return mul(sub(Const(1.0), mul(e, e)), _diff(e.a, key))
    raise AssertionError(f"unhandled node {t}")  # pragma: no cover


def leaves_of(expr: Expr):
    """All leaf instances reachable from ``expr`` (deduplicated by key)."""
    out = {}
    stack = [expr]
    seen = set()
    while stack:
        e = stack.pop()
        if id(e) in seen:
            continue
        seen.add(id(e))
        if isinstance(e, _Leaf):
            out[e.key] = e
        elif isinstance(e, _Bin):
            stack += [e.a, e.b]
        elif isinstance(e, (Pow, _Un)):
            stack.append(e.a)
    return out
