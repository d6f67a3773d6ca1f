"""Automatic differentiation engine.

Reverse mode runs over a recorded tape (training gradients); forward mode
propagates first/second-order duals (input derivatives of the network).  The
two compose: running forward mode with tape refs as the value payload puts
the propagated derivatives on the tape, so they can themselves be
differentiated with respect to parameters.
"""

from .duals import (
    Dual,
    Dual2,
    cos,
    exp,
    forward_first,
    forward_second,
    log,
    sin,
    softplus,
    sqrt,
    tanh,
)
from .kernel import BACKEND
from .tape import DomainError, Ref, Tape, reverse_grad, trace

__all__ = [
    "BACKEND",
    "DomainError",
    "Dual",
    "Dual2",
    "Ref",
    "Tape",
    "cos",
    "exp",
    "forward_first",
    "forward_second",
    "log",
    "reverse_grad",
    "sin",
    "softplus",
    "sqrt",
    "tanh",
    "trace",
]
