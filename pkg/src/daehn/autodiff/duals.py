"""Forward-mode dual numbers, first and second order, payload-generic.

``Dual`` carries (v, d1); ``Dual2`` carries (v, d1, d2) where d1/d2 are the
first and second directional derivatives along one input axis.  Payloads may
be floats, numpy arrays or tape refs; nesting a Dual2 over tape refs makes the
propagated derivatives themselves differentiable in reverse mode (the
derivative values become tape nodes).

Only diagonal second-order information is propagated: for every primitive the
second-order chain rule closes per axis, so cross partials are never needed
or produced.
"""

from __future__ import annotations

import math

import numpy as np

from .tape import Ref, SharedRef


def _apply(name, x):
    if isinstance(x, (Dual, Dual2, Ref, SharedRef)):
        return getattr(x, name)()
    if name == "softplus":
        if isinstance(x, np.ndarray):
            return np.logaddexp(0.0, x)
        return math.log1p(math.exp(-abs(x))) + max(x, 0.0)
    if isinstance(x, np.ndarray):
        return getattr(np, name)(x)
    return getattr(math, name)(x)


def exp(x):
    return _apply("exp", x)


def log(x):
    return _apply("log", x)


def sin(x):
    return _apply("sin", x)


def cos(x):
    return _apply("cos", x)


def sqrt(x):
    return _apply("sqrt", x)


def tanh(x):
    return _apply("tanh", x)


def softplus(x):
    return _apply("softplus", x)


class Dual:
    """First-order dual number (v, d1)."""

    __slots__ = ("v", "d1")

    def __init__(self, v, d1=0.0):
        self.v = v
        self.d1 = d1

    @staticmethod
    def _co(x):
        return x if isinstance(x, Dual) else Dual(x)

    def __add__(self, o):
        o = Dual._co(o)
        return Dual(self.v + o.v, self.d1 + o.d1)

    __radd__ = __add__

    def __sub__(self, o):
        o = Dual._co(o)
        return Dual(self.v - o.v, self.d1 - o.d1)

    def __rsub__(self, o):
        return Dual._co(o).__sub__(self)

    def __mul__(self, o):
        o = Dual._co(o)
        return Dual(self.v * o.v, self.v * o.d1 + self.d1 * o.v)

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = Dual._co(o)
        q = self.v / o.v
        return Dual(q, (self.d1 - q * o.d1) / o.v)

    def __rtruediv__(self, o):
        return Dual._co(o).__truediv__(self)

    def __neg__(self):
        return Dual(-self.v, -self.d1)

    def __pow__(self, n):
        return Dual(self.v**n, n * self.v ** (n - 1) * self.d1)

    def exp(self):
        e = exp(self.v)
        return Dual(e, e * self.d1)

    def log(self):
        return Dual(log(self.v), self.d1 / self.v)

    def sin(self):
        return Dual(sin(self.v), cos(self.v) * self.d1)

    def cos(self):
        return Dual(cos(self.v), -sin(self.v) * self.d1)

    def sqrt(self):
        s = sqrt(self.v)
        return Dual(s, self.d1 / (2.0 * s))

    def tanh(self):
        t = tanh(self.v)
        return Dual(t, (1.0 - t * t) * self.d1)

    def softplus(self):
        s = softplus(self.v)
        return Dual(s, self.d1 / (1.0 + exp(-self.v)))


class Dual2:
    """Second-order dual number (v, d1, d2) along one axis.

    Arithmetic satisfies the second-order chain rule: for f(g),
    d2 = f''(g) g'^2 + f'(g) g''.
    """

    __slots__ = ("v", "d1", "d2")

    def __init__(self, v, d1=0.0, d2=0.0):
        self.v = v
        self.d1 = d1
        self.d2 = d2

    @staticmethod
    def _co(x):
        return x if isinstance(x, Dual2) else Dual2(x)

    def __add__(self, o):
        o = Dual2._co(o)
        return Dual2(self.v + o.v, self.d1 + o.d1, self.d2 + o.d2)

    __radd__ = __add__

    def __sub__(self, o):
        o = Dual2._co(o)
        return Dual2(self.v - o.v, self.d1 - o.d1, self.d2 - o.d2)

    def __rsub__(self, o):
        return Dual2._co(o).__sub__(self)

    def __mul__(self, o):
        o = Dual2._co(o)
        return Dual2(
            self.v * o.v,
            self.v * o.d1 + self.d1 * o.v,
            self.v * o.d2 + 2.0 * self.d1 * o.d1 + self.d2 * o.v,
        )

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = Dual2._co(o)
        q = self.v / o.v
        q1 = (self.d1 - q * o.d1) / o.v
        q2 = (self.d2 - 2.0 * q1 * o.d1 - q * o.d2) / o.v
        return Dual2(q, q1, q2)

    def __rtruediv__(self, o):
        return Dual2._co(o).__truediv__(self)

    def __neg__(self):
        return Dual2(-self.v, -self.d1, -self.d2)

    def __pow__(self, n):
        p1 = n * self.v ** (n - 1)
        return Dual2(
            self.v**n,
            p1 * self.d1,
            n * (n - 1) * self.v ** (n - 2) * self.d1 * self.d1 + p1 * self.d2,
        )

    def exp(self):
        e = exp(self.v)
        return Dual2(e, e * self.d1, e * (self.d2 + self.d1 * self.d1))

    def log(self):
        d1 = self.d1 / self.v
        return Dual2(log(self.v), d1, self.d2 / self.v - d1 * d1)

    def sin(self):
        s, c = sin(self.v), cos(self.v)
        return Dual2(s, c * self.d1, c * self.d2 - s * self.d1 * self.d1)

    def cos(self):
        s, c = sin(self.v), cos(self.v)
        return Dual2(c, -s * self.d1, -s * self.d2 - c * self.d1 * self.d1)

    def sqrt(self):
        s = sqrt(self.v)
        return Dual2(
            s,
            self.d1 / (2.0 * s),
            self.d2 / (2.0 * s) - self.d1 * self.d1 / (4.0 * s * s * s),
        )

    def tanh(self):
        t = tanh(self.v)
        u = 1.0 - t * t
        return Dual2(
            t,
            u * self.d1,
            u * self.d2 - 2.0 * t * u * self.d1 * self.d1,
        )

    def softplus(self):
        s = softplus(self.v)
        sig = 1.0 / (1.0 + exp(-self.v))
        return Dual2(
            s,
            sig * self.d1,
            sig * self.d2 + sig * (1.0 - sig) * self.d1 * self.d1,
        )


def fused_muladd(acc, w, x):
    """acc + w * x, routed through the tape's fused op when the pattern is
    (ref accumulator, shared-slot coefficient, ref operand); duals recurse
    componentwise (the pattern is linear per component)."""
    if isinstance(x, Dual2):
        a = acc if isinstance(acc, Dual2) else Dual2(acc)
        return Dual2(
            fused_muladd(a.v, w, x.v),
            fused_muladd(a.d1, w, x.d1),
            fused_muladd(a.d2, w, x.d2),
        )
    if isinstance(x, Dual):
        a = acc if isinstance(acc, Dual) else Dual(acc)
        return Dual(fused_muladd(a.v, w, x.v), fused_muladd(a.d1, w, x.d1))
    if isinstance(x, float) and x == 0.0:
        return acc
    if isinstance(w, SharedRef) and isinstance(x, Ref) and isinstance(acc, Ref):
        return acc.tape.muladd(acc, w, x)
    return acc + w * x


def forward_first(program, inputs, axis):
    """First directional derivative of each output along one coordinate axis."""
    xs = [Dual(v, 1.0 if i == axis else 0.0) for i, v in enumerate(inputs)]
    out = program(xs)
    out = out if isinstance(out, (list, tuple)) else [out]
    return [o.d1 if isinstance(o, Dual) else 0.0 * o for o in out]


def forward_second(program, inputs, axis):
    """Diagonal second derivative of each output along one coordinate axis."""
    xs = [Dual2(v, 1.0 if i == axis else 0.0) for i, v in enumerate(inputs)]
    out = program(xs)
    out = out if isinstance(out, (list, tuple)) else [out]
    return [o.d2 if isinstance(o, Dual2) else 0.0 * o for o in out]
