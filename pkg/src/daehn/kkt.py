"""Constraint sets, the neighbor-coupling rows, and KKT square-system assembly.

The projection solves, per point, the first-order conditions of

    min 0.5 ||y - yhat||^2
    s.t. U_i(x, y, d) = 0        differential rows, derivatives algebraized
         h_j(x, y) = 0           equalities (boundary/initial rows appended here)
         g_k(x, y) <= 0          inequalities, slack s_k added
         y_p = M_p(x, d)         neighbor coupling per output

Unknown ordering is [y, d, lam_D, lam_E, lam_I, lam_P, s]; the residual rows
follow the same block order: stationarity in (y, d), then the primal rows,
then one Fischer-Burmeister row per inequality.  The system is square by
construction and its Jacobian is assembled symbolically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import symbolic as sym


class DerivVar(NamedTuple):
    output: int
    axis: int
    order: int  # 1 or 2 (diagonal second derivative)


class DerivRegistry:
    """Ordered registry of algebraized derivative variables.

    Constraint builders request variables through ``first``/``second``; each
    (output, axis, order) triple is registered once and keeps a stable index.
    """

    def __init__(self):
        self.vars: list[DerivVar] = []
        self._index: dict[DerivVar, int] = {}

    def __len__(self):
        return len(self.vars)

    def _get(self, output, axis, order) -> sym.Deriv:
        v = DerivVar(int(output), int(axis), int(order))
        q = self._index.get(v)
        if q is None:
            q = len(self.vars)
            self.vars.append(v)
            self._index[v] = q
        return sym.Deriv(q)

    def first(self, output, axis=0) -> sym.Deriv:
        return self._get(output, axis, 1)

    def second(self, output, axis=0) -> sym.Deriv:
        return self._get(output, axis, 2)

    def index_of(self, output, axis, order) -> int:
        return self._index[DerivVar(int(output), int(axis), int(order))]

    def has(self, output, axis, order) -> bool:
        return DerivVar(int(output), int(axis), int(order)) in self._index

    def label(self, q: int) -> str:
        v = self.vars[q]
        return f"d{'' if v.order == 1 else '2'}y{v.output + 1}/da{v.axis + 1}" + (
            "" if v.order == 1 else "^2"
        )


@dataclass
class ConstraintSet:
    """Differential rows U_i, equalities h_j, inequalities g_k (g <= 0)."""

    n_y: int
    differential: list = field(default_factory=list)
    equalities: list = field(default_factory=list)
    inequalities: list = field(default_factory=list)
    registry: DerivRegistry = field(default_factory=DerivRegistry)

    @property
    def n_diff(self):
        return len(self.differential)

    @property
    def n_eq(self):
        return len(self.equalities)

    @property
    def n_ineq(self):
        return len(self.inequalities)

    def all_rows(self):
        return list(self.differential) + list(self.equalities) + list(self.inequalities)

    def validate(self):
        n = len(self.registry)
        for e in self.all_rows():
            for key, leaf in sym.leaves_of(e).items():
                if key[0] == "d" and not (0 <= leaf.q < n):
                    raise AssemblyError(f"unregistered derivative leaf d{leaf.q}")
                if key[0] == "y" and not (0 <= leaf.p < self.n_y):
                    raise AssemblyError(f"output leaf y{leaf.p} out of range")


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class TaylorCoupling:
    """Per-output coupling tying y_p to its derivative variables through
    neighbor evaluations offset by ``delta`` along each of ``n_axes`` axes.

    ``order`` controls which derivative variables the coupling *creates*:
    order=1 registers first derivatives only, order=2 additionally registers
    the diagonal second derivatives.  The expansion itself always carries the
    half-squared-step term for any second-derivative variable that exists in
    the registry (e.g. because a constraint row already algebraizes it):
    those unknowns are solved for either way, and dropping them from the
    expansion would bias the coupled first derivatives by O(step * y'')
    instead of O(step^2).
    """

    delta: float
    order: int
    n_axes: int

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("coupling order must be 1 or 2")
        if self.delta <= 0.0:
            raise ValueError("coupling step must be positive")
        if self.n_axes < 1:
            raise ValueError("coupling needs at least one axis")

    def require(self, registry: DerivRegistry, n_y: int):
        """Register every derivative variable the coupling references."""
        for p in range(n_y):
            for axis in range(self.n_axes):
                registry.first(p, axis)
                if self.order == 2:
                    registry.second(p, axis)

    def residual(self, p: int, registry: DerivRegistry) -> sym.Expr:
        """y_p - M_p where M_p averages the per-axis neighbor expansions."""
        acc = None
        for axis in range(self.n_axes):
            term = sym.Neighbor(axis, p) - sym.Const(self.delta) * registry.first(p, axis)
            if registry.has(p, axis, 2):
                term = term - sym.Const(0.5 * self.delta**2) * registry.second(p, axis)
            acc = term if acc is None else acc + term
        m = acc / sym.Const(self.n_axes) if self.n_axes > 1 else acc
        return sym.Output(p) - m


@dataclass
class KKTSystem:
    """Square residual F and Jacobian J of the projection conditions."""

    constraints: ConstraintSet
    coupling: Optional[TaylorCoupling]
    n_y: int
    n_d: int
    extra_equalities: tuple
    residual: list  # n Exprs
    jacobian: list  # n x n Exprs
    unknown_keys: list  # leaf key per unknown

    @property
    def n(self):
        return len(self.residual)

    # block offsets into the unknown vector
    @property
    def off_d(self):
        return self.n_y

    @property
    def off_mult(self):
        return self.n_y + self.n_d

    @property
    def n_mult(self):
        c = self.constraints
        lam_p = self.n_y if self.coupling is not None else 0
        return c.n_diff + c.n_eq + len(self.extra_equalities) + c.n_ineq + lam_p

    @property
    def n_slack(self):
        return self.constraints.n_ineq

    def mult_slices(self):
        """Offsets of (lam_D, lam_E, lam_I, lam_P, s) inside the multiplier
        block; lam_E includes appended equality rows."""
        c = self.constraints
        nd, ne, ni = c.n_diff, c.n_eq + len(self.extra_equalities), c.n_ineq
        lam_p = self.n_y if self.coupling is not None else 0
        ofs = np.cumsum([0, nd, ne, ni, lam_p])
        return {
            "lam_d": slice(0, ofs[1]),
            "lam_e": slice(ofs[1], ofs[2]),
            "lam_i": slice(ofs[2], ofs[3]),
            "lam_p": slice(ofs[3], ofs[4]),
            "slack": slice(ofs[4], ofs[4] + ni),
        }


def assemble_kkt(
    constraints: ConstraintSet,
    coupling: Optional[TaylorCoupling] = None,
    extra_equalities=(),
) -> KKTSystem:
    """Build the square first-order system for one projection problem.

    ``extra_equalities`` (boundary/initial rows) are appended to the equality
    block with their own multipliers, keeping the system square.
    """
    constraints.validate()
    reg = constraints.registry
    n_y = constraints.n_y
    if coupling is not None:
        coupling.require(reg, n_y)
    n_d = len(reg)

    c = constraints
    extra = tuple(extra_equalities)
    eq_rows = list(c.equalities) + list(extra)
    coup_rows = (
        [coupling.residual(p, reg) for p in range(n_y)] if coupling is not None else []
    )

    # multiplier layout: lam_D, lam_E(+extras), lam_I, lam_P, s
    k = 0
    lam_d = [sym.Mult(k + i) for i in range(c.n_diff)]
    k += c.n_diff
    lam_e = [sym.Mult(k + i) for i in range(len(eq_rows))]
    k += len(eq_rows)
    lam_i = [sym.Mult(k + i) for i in range(c.n_ineq)]
    k += c.n_ineq
    lam_p = [sym.Mult(k + i) for i in range(len(coup_rows))]
    k += len(coup_rows)
    slack = [sym.Mult(k + i) for i in range(c.n_ineq)]
    k += c.n_ineq

    primal_pairs = (
        list(zip(lam_d, c.differential))
        + list(zip(lam_e, eq_rows))
        + list(zip(lam_i, c.inequalities))
        + list(zip(lam_p, coup_rows))
    )

    unknown_keys = (
        [("y", p) for p in range(n_y)]
        + [("d", q) for q in range(n_d)]
        + [("m", i) for i in range(k)]
    )

    residual = []
    for p in range(n_y):
        row = sym.Output(p) - sym.YHat(p)
        for lam, con in primal_pairs:
            row = row + sym.mul(lam, sym.differentiate(con, ("y", p)))
        residual.append(row)
    for q in range(n_d):
        row = sym.Const(0.0)
        for lam, con in primal_pairs:
            row = row + sym.mul(lam, sym.differentiate(con, ("d", q)))
        residual.append(row)
    residual += [con for _, con in primal_pairs[: c.n_diff]]
    residual += eq_rows
    residual += [g + s for g, s in zip(c.inequalities, slack)]
    residual += coup_rows
    residual += [sym.fb_expr(li, s) for li, s in zip(lam_i, slack)]

    n = len(unknown_keys)
    if len(residual) != n:
        raise AssemblyError(f"non-square system: {len(residual)} rows, {n} unknowns")

    jacobian = [[sym.differentiate(r, key) for key in unknown_keys] for r in residual]
    return KKTSystem(
        constraints=c,
        coupling=coupling,
        n_y=n_y,
        n_d=n_d,
        extra_equalities=extra,
        residual=residual,
        jacobian=jacobian,
        unknown_keys=unknown_keys,
    )


def smallest_signed_violation(constraints: ConstraintSet, bindings: sym.Bindings):
    """Raw residual per constraint row, ordered [U..., h..., g...].

    Callers apply absolute values to the differential/equality entries and a
    positive-part clamp to the inequality entries.
    """
    memo = {}
    return [sym.evaluate(e, bindings, memo) for e in constraints.all_rows()]
