"""Sweep-kernel selection: compiled extension when present, numpy otherwise.

Set DAEHN_PURE_PYTHON=1 to force the fallback; ``use()`` switches at runtime
(used by the kernel benchmark and the equivalence tests).
"""

import os

from . import pykernel

_impls = {"python": pykernel}
try:
    if not os.environ.get("DAEHN_PURE_PYTHON"):
        from . import _ckernel

        _impls["compiled"] = _ckernel
except ImportError:
    pass

BACKEND = "compiled" if "compiled" in _impls else "python"


def use(name: str):
    global BACKEND, forward, reverse
    if name not in _impls:
        raise ValueError(f"kernel backend {name!r} unavailable")
    BACKEND = name
    forward = _impls[name].forward
    reverse = _impls[name].reverse


def available():
    return sorted(_impls)


forward = _impls[BACKEND].forward
reverse = _impls[BACKEND].reverse
