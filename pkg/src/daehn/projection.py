"""Per-point Newton solves of the KKT square system.

The inference path (`newton_solve`, `project_batch`) runs damped Newton over
the whole batch at once: residual and Jacobian expressions are evaluated with
batched bindings, every linear solve carries the diagonal shift
``jacobian_regularization``, converged points freeze, and failures surface as
flagged results rather than exceptions.

The shift is applied on every iteration, not only on detected singularity:
order-2 neighbor couplings make the KKT Jacobian structurally rank-deficient
(several derivative variables appear in a single row), so conditional
regularization would trip over rounding noise.  At a root the step vanishes
either way, so fixed points are unaffected.

The training path (`project_differentiable`) unrolls the same iteration onto
a tape with the linear solve as a differentiable block, so gradients flow to
the warm start (backbone outputs, multiplier head, propagated derivatives)
and through every expression coefficient (learnable physical parameters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import symbolic as sym
from .autodiff.tape import Ref, Tape
from .kkt import KKTSystem
from .symbolic import Bindings, Const, EvalError, evaluate


@dataclass(frozen=True)
class ProjectionConfig:
    newton_step_length: float = 1.0
    max_newton_iter: int = 10
    residual_tol: float = 1e-10
    jacobian_regularization: float = 1e-10

    def __post_init__(self):
        if not (0.0 < self.newton_step_length <= 1.0):
            raise ValueError("newton_step_length must be in (0, 1]")
        if self.max_newton_iter < 1:
            raise ValueError("max_newton_iter must be >= 1")
        if self.residual_tol <= 0.0:
            raise ValueError("residual_tol must be positive")
        if self.jacobian_regularization < 0.0:
            raise ValueError("jacobian_regularization must be non-negative")


@dataclass
class ProjectionResult:
    y_proj: np.ndarray  # (B, n_y)
    d_proj: np.ndarray  # (B, n_d)
    multipliers: np.ndarray  # (B, n_lambda)
    slacks: np.ndarray  # (B, n_slack)
    converged: np.ndarray  # (B,) bool
    residual_norm: np.ndarray  # (B,)
    iterations: np.ndarray  # (B,) int


class _CompiledSystem:
    """Constant Jacobian entries filled once; variable entries kept as exprs."""

    def __init__(self, system: KKTSystem):
        self.system = system
        n = system.n
        self.base_jac = np.zeros((n, n))
        self.var_entries = []
        for r in range(n):
            for c in range(n):
                e = system.jacobian[r][c]
                if isinstance(e, Const):
                    self.base_jac[r, c] = e.v
                else:
                    self.var_entries.append((r, c, e))


_compiled_cache: dict[int, _CompiledSystem] = {}


def _compiled(system: KKTSystem) -> _CompiledSystem:
    cs = _compiled_cache.get(id(system))
    if cs is None or cs.system is not system:
        cs = _CompiledSystem(system)
        _compiled_cache[id(system)] = cs
    return cs


def _bind(system: KKTSystem, z, fixed: Bindings) -> Bindings:
    n_y, off_d, off_m = system.n_y, system.off_d, system.off_mult
    return Bindings(
        inputs=fixed.inputs,
        outputs=[z[p] for p in range(n_y)],
        derivs=[z[off_d + q] for q in range(system.n_d)],
        mults=[z[off_m + k] for k in range(system.n_mult + system.n_slack)],
        y_hat=fixed.y_hat,
        neighbors=fixed.neighbors,
        params=fixed.params,
    )


def newton_solve(
    system: KKTSystem, init, fixed: Bindings, config: ProjectionConfig
) -> ProjectionResult:
    """Damped Newton on F(z) = 0, one independent solve per batch column.

    ``init`` is (n,) or (B, n).  Converged columns freeze; columns whose step
    turns non-finite are frozen and reported as non-converged.
    """
    z0 = np.atleast_2d(np.asarray(init, dtype=np.float64))  # (B, n)
    B, n = z0.shape
    if n != system.n:
        raise ValueError(f"init has {n} unknowns, system has {system.n}")
    comp = _compiled(system)
    z = z0.T.copy()  # (n, B)
    alpha = config.newton_step_length
    mu = config.jacobian_regularization

    converged = np.zeros(B, dtype=bool)
    dead = np.zeros(B, dtype=bool)
    iterations = np.zeros(B, dtype=np.int64)
    res_norm = np.full(B, np.inf)

    for it in range(config.max_newton_iter + 1):
        try:
            F = _residual(comp, z, fixed, B)
        except (EvalError, ZeroDivisionError, FloatingPointError):
            dead |= ~converged
            break
        res_norm = np.max(np.abs(F), axis=0)
        bad = ~np.isfinite(res_norm)
        dead |= bad & ~converged
        newly = (res_norm <= config.residual_tol) & ~converged & ~dead
        iterations[newly] = it
        converged |= newly
        active = ~(converged | dead)
        if it == config.max_newton_iter or not active.any():
            iterations[active] = it
            break
        J = _jacobian(comp, z, fixed, B)
        step = _solve_shifted(J[active], F[:, active].T, mu)
        if step is None:
            dead |= active
            break
        nonfin = ~np.isfinite(step).all(axis=1)
        step[nonfin] = 0.0
        zi = z[:, active]
        zi -= alpha * step.T
        z[:, active] = zi
        if nonfin.any():
            idx = np.flatnonzero(active)[nonfin]
            dead[idx] = True

    return _result(system, z, converged & ~dead, res_norm, iterations)


def _residual(comp, z, fixed, B):
    b = _bind(comp.system, z, fixed)
    memo = {}
    F = np.empty((comp.system.n, B))
    for r, e in enumerate(comp.system.residual):
        F[r] = evaluate(e, b, memo)
    return F


def _jacobian(comp, z, fixed, B):
    b = _bind(comp.system, z, fixed)
    memo = {}
    n = comp.system.n
    J = np.broadcast_to(comp.base_jac, (B, n, n)).copy()
    for r, c, e in comp.var_entries:
        J[:, r, c] = evaluate(e, b, memo)
    return J


def _solve_shifted(J, F, mu):
    """Solve (J + mu I) step = F batched; None when even the fallback fails."""
    n = J.shape[-1]
    A = J.copy()
    A[:, np.arange(n), np.arange(n)] += mu
    try:
        return np.linalg.solve(A, F[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(F)
        for j in range(A.shape[0]):
            try:
                out[j] = np.linalg.solve(A[j] + mu * 1e3 * np.eye(n), F[j])
            except np.linalg.LinAlgError:
                return None
        return out


def _result(system, z, converged, res_norm, iterations):
    off_m = system.off_mult
    mults = z[off_m : off_m + system.n_mult].T
    slacks = z[off_m + system.n_mult :].T
    return ProjectionResult(
        y_proj=z[: system.n_y].T.copy(),
        d_proj=z[system.off_d : off_m].T.copy(),
        multipliers=mults.copy(),
        slacks=slacks.copy(),
        converged=converged.copy(),
        residual_norm=res_norm.copy(),
        iterations=iterations.copy(),
    )


def warm_start(system: KKTSystem, bundle, slack_mode="clamp") -> np.ndarray:
    """Initial iterate from backbone predictions: y from the output head,
    d from the propagated derivatives, multipliers from the multiplier head
    (appended equality rows start at zero), slacks from max(-g(yhat), 0) or
    from the head's softplus slice."""
    y_hat = np.atleast_2d(bundle.y_hat)
    B = y_hat.shape[0]
    n_extra = len(system.extra_equalities)
    z = np.zeros((B, system.n))
    z[:, : system.n_y] = y_hat
    if system.n_d:
        z[:, system.off_d : system.off_mult] = np.atleast_2d(bundle.d_hat)
    lam = np.atleast_2d(bundle.lambda_hat)
    c = system.constraints
    sl = system.mult_slices()
    off = system.off_mult
    blocks = [
        (sl["lam_d"], 0, c.n_diff),
        (sl["lam_e"], c.n_diff, c.n_diff + c.n_eq),
    ]
    base = c.n_diff + c.n_eq
    blocks.append((sl["lam_i"], base, base + c.n_ineq))
    base += c.n_ineq
    if system.coupling is not None:
        blocks.append((sl["lam_p"], base, base + system.n_y))
        base += system.n_y
    for target, lo, hi in blocks:
        width = hi - lo
        if width == 0:
            continue
        tgt = np.arange(off + target.start, off + target.start + width)
        z[:, tgt] = lam[:, lo:hi]
    if c.n_ineq:
        if slack_mode == "head":
            z[:, off + sl["slack"].start : off + sl["slack"].start + c.n_ineq] = lam[
                :, base : base + c.n_ineq
            ]
        else:
            g = _eval_inequalities(system, bundle)
            z[:, off + sl["slack"].start : off + sl["slack"].start + c.n_ineq] = (
                np.maximum(-g, 0.0)
            )
    return z


def _eval_inequalities(system, bundle):
    y_hat = np.atleast_2d(bundle.y_hat)
    b = Bindings(
        inputs=list(np.atleast_2d(bundle.inputs).T) if bundle.inputs is not None else None,
        outputs=list(y_hat.T),
        params=getattr(bundle, "params", None) or {},
    )
    memo = {}
    return np.stack(
        [np.broadcast_to(evaluate(g, b, memo), (y_hat.shape[0],)) for g in system.constraints.inequalities],
        axis=1,
    )


def fixed_bindings(bundle) -> Bindings:
    """Solve-time constants from a batched backbone bundle."""
    inputs = np.atleast_2d(bundle.inputs)
    y_hat = np.atleast_2d(bundle.y_hat)
    neigh = getattr(bundle, "neighbor_evals", None)
    neighbors = None
    if neigh is not None and np.size(neigh):
        arr = np.asarray(neigh)
        if arr.ndim == 2:
            arr = arr[None]
        neighbors = [[arr[:, ax, p] for p in range(arr.shape[2])] for ax in range(arr.shape[1])]
    return Bindings(
        inputs=list(inputs.T),
        y_hat=list(y_hat.T),
        neighbors=neighbors,
        params=dict(getattr(bundle, "params", None) or {}),
    )


def project_batch(bundle, system: KKTSystem, config: ProjectionConfig) -> ProjectionResult:
    """Project one batched bundle through one system; per-point failures are
    recorded, never raised, and results keep input order."""
    init = warm_start(system, bundle)
    return newton_solve(system, init, fixed_bindings(bundle), config)


class TracedProjection:
    """Refs of the unrolled solve: outputs, derivative variables, final
    residual rows (for convergence diagnostics after the tape runs)."""

    def __init__(self, y, d, mults, residual):
        self.y = y
        self.d = d
        self.mults = mults
        self.residual = residual


def project_differentiable(
    tape: Tape,
    system: KKTSystem,
    init_refs: list,
    fixed: Bindings,
    config: ProjectionConfig,
) -> TracedProjection:
    """Unroll ``max_newton_iter`` damped steps on the tape.

    ``init_refs`` is the warm-start list of n refs; ``fixed`` binds inputs,
    backbone outputs, neighbor evaluations and parameters to refs or floats.
    The per-iteration linear solve is the tape's dense-solve block, so the
    reverse sweep applies its exact adjoint.
    """
    comp = _compiled(system)
    n = system.n
    z = list(init_refs)
    if len(z) != n:
        raise ValueError(f"warm start has {len(z)} refs, system needs {n}")
    alpha = config.newton_step_length
    const = tape.const
    F_refs = None
    for _ in range(config.max_newton_iter):
        b = _bind(system, z, fixed)
        memo = {}
        F_refs = [_as_ref(tape, evaluate(e, b, memo)) for e in system.residual]
        rows = []
        for r in range(n):
            row = []
            for c in range(n):
                e = system.jacobian[r][c]
                if isinstance(e, Const):
                    row.append(const(e.v))
                else:
                    row.append(_as_ref(tape, evaluate(e, b, memo)))
            rows.append(row)
        step = tape.solve(rows, F_refs, mu=config.jacobian_regularization)
        z = [zi - alpha * si for zi, si in zip(z, step)]
    b = _bind(system, z, fixed)
    memo = {}
    final_res = [_as_ref(tape, evaluate(e, b, memo)) for e in system.residual]
    off_m = system.off_mult
    return TracedProjection(
        y=z[: system.n_y],
        d=z[system.off_d : off_m],
        mults=z[off_m:],
        residual=final_res,
    )


def _as_ref(tape, v):
    return v if isinstance(v, Ref) else tape.const(float(v))


def solution_input_jacobian(
    system: KKTSystem,
    z_star: np.ndarray,  # (B, n)
    fixed: Bindings,
    dyhat_dx: np.ndarray,  # (B, n_y, n_in)
    dneigh_dx,  # (B, n_axes, n_y, n_in) or None
    config: ProjectionConfig,
) -> np.ndarray:
    """d(y_proj)/d(inputs) via the implicit function theorem at the solution.

    Differentiates F(z; x, yhat(x), neighbors(x)) = 0:
        (J + mu I) dz/dx = -(dF/dx + dF/dyhat dyhat/dx + dF/dnb dnb/dx)
    Returns (B, n_y, n_in).
    """
    comp = _compiled(system)
    z = z_star.T
    B, n = z_star.shape
    n_in = dyhat_dx.shape[2]
    b = _bind(system, z, fixed)
    memo = {}
    rhs = np.zeros((B, n, n_in))
    for r, e in enumerate(system.residual):
        for i in range(n_in):
            de = sym.differentiate(e, ("x", i))
            if not isinstance(de, Const) or de.v != 0.0:
                rhs[:, r, i] += evaluate(de, b, memo)
        for p in range(system.n_y):
            de = sym.differentiate(e, ("yhat", p))
            if isinstance(de, Const) and de.v == 0.0:
                continue
            rhs[:, r, :] += np.asarray(evaluate(de, b, memo)).reshape(-1, 1) * dyhat_dx[:, p, :]
        if dneigh_dx is not None:
            for key, leaf in sym.leaves_of(e).items():
                if key[0] != "nb":
                    continue
                de = sym.differentiate(e, key)
                rhs[:, r, :] += (
                    np.asarray(evaluate(de, b, memo)).reshape(-1, 1)
                    * dneigh_dx[:, leaf.axis, leaf.p, :]
                )
    J = _jacobian(comp, z, fixed, B)
    A = J.copy()
    A[:, np.arange(n), np.arange(n)] += config.jacobian_regularization
    dz = np.linalg.solve(A, -rhs)
    return dz[:, : system.n_y, :]
