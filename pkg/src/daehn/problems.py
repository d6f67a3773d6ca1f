"""Benchmark problem registry: constraints, data generators, oracles, and the
boundary/initial-condition projection pool.

Each entry supplies the constraint builder (optionally with named learnable
parameters), a deterministic data generator, the ground-truth solution and
derivative oracles used by metrics and parity artifacts, per-problem training
defaults, and any boundary/initial rows with their applicability predicates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import symbolic as sym
from .kkt import ConstraintSet, DerivRegistry, TaylorCoupling, assemble_kkt
from .rk4 import rk4_integrate

BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class Axis:
    name: str
    lo: float
    hi: float
    is_time: bool = False


@dataclass
class ConditionSpec:
    """One appended-equality class (boundary or initial rows)."""

    kind: str  # "bc" | "ic"
    rows: list  # Exprs in Output/Input leaves
    applies: object  # vectorized predicate X (B, n_in) -> (B,) bool


@dataclass
class Dataset:
    X: np.ndarray  # (N, n_in)
    Y: np.ndarray  # (N, n_y)
    split: np.ndarray  # (N,) of "train"/"val"
    provenance: str

    @property
    def train(self):
        m = self.split == "train"
        return self.X[m], self.Y[m]

    @property
    def val(self):
        m = self.split == "val"
        return self.X[m], self.Y[m]


@dataclass
class ProblemSpec:
    name: str
    axes: list
    n_y: int
    output_names: list
    constants: dict
    estimable: dict  # name -> true value (parameters an inverse run learns)
    phys_defaults: dict  # default initial guesses when estimating
    defaults: dict  # per-problem training defaults
    has_coupling: bool
    build_constraints: object  # (registry, params: dict[name -> Expr|float]) -> ConstraintSet
    generate: object  # (num_points, seed) -> (X, Y)
    oracle: object  # X (B, n_in) -> Y (B, n_y)
    oracle_derivatives: object  # (X, registry) -> (B, n_d)
    oracle_jacobian: object = None  # X -> (B, n_y, n_in), where closed form exists
    conditions: list = field(default_factory=list)

    @property
    def n_in(self):
        return len(self.axes)

    def constraints(self, estimate=False):
        """Constraint set with constants baked in, or Param leaves for the
        estimable ones when ``estimate`` is set."""
        reg = DerivRegistry()
        params = {}
        for k, v in self.constants.items():
            params[k] = sym.Param(k) if (estimate and k in self.estimable) else sym.Const(v)
        return self.build_constraints(reg, params), reg


_REGISTRY = {}


def register(fn):
    spec = fn()
    _REGISTRY[spec.name] = fn
    return fn


def problem_names():
    return sorted(_REGISTRY)


def build_problem(name: str, constants=None) -> ProblemSpec:
    """Registry lookup; ``constants`` overrides problem constants."""
    if name not in _REGISTRY:
        raise KeyError(f"unknown problem {name!r}; known: {', '.join(problem_names())}")
    spec = _REGISTRY[name]()
    if constants:
        unknown = set(constants) - set(spec.constants)
        if unknown:
            raise KeyError(f"unknown constants for {name}: {sorted(unknown)}")
        spec.constants.update(constants)
    return spec


# ------------------------------------------------------------------ datasets
def _grid_1d(lo, hi, n):
    return np.linspace(lo, hi, n)[:, None]


def _grid_2d(ax0, ax1, m):
    a = np.linspace(ax0.lo, ax0.hi, m)
    b = np.linspace(ax1.lo, ax1.hi, m)
    A, B = np.meshgrid(a, b, indexing="ij")
    return np.stack([A.ravel(), B.ravel()], axis=1)


def _subsample(X, num_points, seed):
    if num_points > len(X):
        raise ValueError(f"requested {num_points} points, grid has {len(X)}")
    if num_points == len(X):
        return X
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(X), size=num_points, replace=False))
    return X[idx]


def generate_dataset(spec: ProblemSpec, num_points: int, seed: int) -> Dataset:
    """Deterministic grid/trajectory sample with a seeded 80/20 split."""
    X, Y = spec.generate(num_points, seed)
    rng = np.random.default_rng(seed + 1)
    order = rng.permutation(len(X))
    n_train = int(round(0.8 * len(X)))
    split = np.empty(len(X), dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train:]] = "val"
    provenance = spec.defaults.get("provenance", "analytic")
    return Dataset(X=X, Y=Y, split=split.astype(str), provenance=provenance)


# ------------------------------------------------------------------- file io
def export_dataset(dataset: Dataset, spec: ProblemSpec, path):
    """CSV with one column per axis, one per output, plus the split tag."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [a.name for a in spec.axes]
            + [f"y{p + 1}" for p in range(spec.n_y)]
            + ["split"]
        )
        for i in range(len(dataset.X)):
            w.writerow(
                [format(v, ".17g") for v in dataset.X[i]]
                + [format(v, ".17g") for v in dataset.Y[i]]
                + [dataset.split[i]]
            )


def load_dataset(spec: ProblemSpec, path) -> Dataset:
    import csv

    with open(path) as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    expected = [a.name for a in spec.axes] + [
        f"y{p + 1}" for p in range(spec.n_y)
    ]
    if header[: len(expected)] != expected:
        raise ValueError(
            f"header mismatch: expected {expected}..., got {header}"
        )
    has_split = len(header) > len(expected) and header[len(expected)] == "split"
    n_in = len(spec.axes)
    X, Y, split = [], [], []
    for row in rows[1:]:
        X.append([float(v) for v in row[:n_in]])
        Y.append([float(v) for v in row[n_in : n_in + spec.n_y]])
        split.append(row[n_in + spec.n_y] if has_split else "train")
    return Dataset(
        X=np.array(X), Y=np.array(Y), split=np.array(split, dtype=object).astype(str),
        provenance="file",
    )


# ---------------------------------------------------------------------- pool
def kkt_pool(spec: ProblemSpec, constraints: ConstraintSet, coupling):
    """Map from (bc?, ic?) pattern to an assembled square system.

    Training always uses the plain (False, False) system; inference selects
    per point by boundary membership (tolerance 1e-9) and t = t0.
    """
    bc_rows = [r for c in spec.conditions if c.kind == "bc" for r in c.rows]
    ic_rows = [r for c in spec.conditions if c.kind == "ic" for r in c.rows]
    pool = {(False, False): assemble_kkt(constraints, coupling)}
    if bc_rows:
        pool[(True, False)] = assemble_kkt(constraints, coupling, tuple(bc_rows))
    if ic_rows:
        pool[(False, True)] = assemble_kkt(constraints, coupling, tuple(ic_rows))
    if bc_rows and ic_rows:
        pool[(True, True)] = assemble_kkt(
            constraints, coupling, tuple(bc_rows) + tuple(ic_rows)
        )
    return pool


def classify_points(spec: ProblemSpec, X: np.ndarray):
    """Per-point (bc?, ic?) pattern for pool selection."""
    B = len(X)
    bc = np.zeros(B, dtype=bool)
    ic = np.zeros(B, dtype=bool)
    for c in spec.conditions:
        mask = c.applies(X)
        if c.kind == "bc":
            bc |= mask
        else:
            ic |= mask
    return bc, ic


# ------------------------------------------------------------------ problems
@register
def _quadratic() -> ProblemSpec:
    """Outputs solve Y^2 - x1 Y + x2 = 0: y1 + y2 = x1 and y1 y2 = x2."""
    axes = [Axis("x1", 3.0, 4.0), Axis("x2", 0.0, 1.0)]

    def build(reg, params):
        cs = ConstraintSet(n_y=2, registry=reg)
        cs.equalities.append(sym.Output(0) + sym.Output(1) - sym.Input(0))
        cs.equalities.append(sym.Output(0) * sym.Output(1) - sym.Input(1))
        return cs

    def oracle(X):
        X = np.atleast_2d(X)
        disc = np.sqrt(X[:, 0] ** 2 - 4.0 * X[:, 1])
        return np.stack([(X[:, 0] + disc) / 2, (X[:, 0] - disc) / 2], axis=1)

    def generate(num_points, seed):
        X = _subsample(_grid_2d(axes[0], axes[1], 45), num_points, seed)
        return X, oracle(X)

    def oracle_derivs(X, registry):
        return np.zeros((len(np.atleast_2d(X)), 0))

    def oracle_jac(X):
        X = np.atleast_2d(X)
        r = np.sqrt(X[:, 0] ** 2 - 4.0 * X[:, 1])
        J = np.empty((len(X), 2, 2))
        J[:, 0, 0] = 0.5 * (1.0 + X[:, 0] / r)
        J[:, 0, 1] = -1.0 / r
        J[:, 1, 0] = 0.5 * (1.0 - X[:, 0] / r)
        J[:, 1, 1] = 1.0 / r
        return J

    return ProblemSpec(
        name="quadratic",
        axes=axes,
        n_y=2,
        output_names=["y1", "y2"],
        constants={},
        estimable={},
        phys_defaults={},
        defaults=dict(
            num_epochs=5000, model_depth=4, hidden_dim=32, lr=1e-3,
            num_points=2000, pinn_reg_factor=1.0, hardnet_reg_factor=1.0,
            taylor_offset=0.1, taylor_order=1, eta=0.01,
            newton_step_length=1.0, max_newton_iter=10,
            noise_std=1.0, noise_mean=0.0, noise_scale=0.0,
            provenance="analytic",
        ),
        has_coupling=False,
        build_constraints=build,
        generate=generate,
        oracle=oracle,
        oracle_derivatives=oracle_derivs,
        oracle_jacobian=oracle_jac,
    )


def _ode_system_solution(x):
    """Closed form for the coupled second-order pair.

    Substituting back into the equations pins the particular part of the
    second output to x^4/36 - 11 x^2/18 + 11/27 (the x^4 coefficients must
    satisfy a1 = 2*a2 for the first equation's quartic terms to cancel).
    """
    A, B, C, D = -2.0, -2.0, 0.5, 0.0
    s3 = math.sqrt(3.0)
    y1 = (
        x**4 / 18.0 - 5.0 * x**2 / 9.0 - 8.0 / 27.0
        + A * np.sin(s3 * x) + B * np.cos(s3 * x) + 2 * C + 2 * D * x
    )
    y2 = (
        x**4 / 36.0 - 11.0 * x**2 / 18.0 + 11.0 / 27.0
        + 2 * A * np.sin(s3 * x) + 2 * B * np.cos(s3 * x) + C + D * x
    )
    return np.stack([y1, y2], axis=1)


def _ode_system_derivs(x, order):
    A, B, C, D = -2.0, -2.0, 0.5, 0.0
    s3 = math.sqrt(3.0)
    if order == 1:
        d1 = (
            4 * x**3 / 18.0 - 10.0 * x / 9.0
            + s3 * A * np.cos(s3 * x) - s3 * B * np.sin(s3 * x) + 2 * D
        )
        d2 = (
            4 * x**3 / 36.0 - 11.0 * x / 9.0
            + 2 * s3 * A * np.cos(s3 * x) - 2 * s3 * B * np.sin(s3 * x) + D
        )
    else:
        d1 = (
            12 * x**2 / 18.0 - 10.0 / 9.0
            - 3 * A * np.sin(s3 * x) - 3 * B * np.cos(s3 * x)
        )
        d2 = (
            12 * x**2 / 36.0 - 11.0 / 9.0
            - 6 * A * np.sin(s3 * x) - 6 * B * np.cos(s3 * x)
        )
    return np.stack([d1, d2], axis=1)


@register
def _ode_system() -> ProblemSpec:
    axes = [Axis("x1", -4.0, 4.0)]

    def build(reg, params):
        cs = ConstraintSet(n_y=2, registry=reg)
        x = sym.Input(0)
        cs.differential.append(reg.second(0, 0) - sym.Output(0) + 2.0 * sym.Output(1))
        cs.differential.append(
            reg.second(1, 0) + 4.0 * sym.Output(1) - 2.0 * sym.Output(0)
            + x * x - 1.0
        )
        return cs

    def oracle(X):
        return _ode_system_solution(np.atleast_2d(X)[:, 0])

    def generate(num_points, seed):
        X = _grid_1d(-4.0, 4.0, num_points)
        return X, oracle(X)

    def oracle_derivs(X, registry):
        x = np.atleast_2d(X)[:, 0]
        d1 = _ode_system_derivs(x, 1)
        d2 = _ode_system_derivs(x, 2)
        cols = []
        for var in registry.vars:
            cols.append((d1 if var.order == 1 else d2)[:, var.output])
        return np.stack(cols, axis=1)

    return ProblemSpec(
        name="ode_system",
        axes=axes,
        n_y=2,
        output_names=["y1", "y2"],
        constants={},
        estimable={},
        phys_defaults={},
        defaults=dict(
            num_epochs=5000, model_depth=4, hidden_dim=32, lr=1e-3,
            num_points=1500, pinn_reg_factor=1.0, hardnet_reg_factor=1.0,
            taylor_offset=0.1, taylor_order=1, eta=0.01,
            newton_step_length=1.0, max_newton_iter=10,
            noise_std=1.0, noise_mean=0.0, noise_scale=0.01,
            provenance="analytic",
        ),
        has_coupling=True,
        build_constraints=build,
        generate=generate,
        oracle=oracle,
        oracle_derivatives=oracle_derivs,
    )


def _co_ox_theta(P, k1):
    return k1 * P / (1.0 + k1 * P)


@register
def _co_oxidation() -> ProblemSpec:
    """Surface-reaction kinetics: one rate equation plus two algebraic rows
    (site balance and adsorption equilibrium).  Rate constants are not tied
    to any published values; defaults give the mixed zero/first-order regime
    and are overridable."""
    axes = [Axis("t", 0.0, 1000.0, is_time=True)]
    consts = {"kp": 0.05, "k1": 0.02, "p0": 10.0}

    def build(reg, params):
        cs = ConstraintSet(n_y=3, registry=reg)
        P, thC, thV = sym.Output(0), sym.Output(1), sym.Output(2)
        cs.differential.append(reg.first(0, 0) + params["kp"] * thC)
        cs.equalities.append(thC - params["k1"] * P * thV)
        cs.equalities.append(thV + thC - 1.0)
        return cs

    def _trajectory(kp, k1, p0):
        rhs = lambda t, y: np.array([-kp * k1 * y[0] / (1.0 + k1 * y[0])])
        return rk4_integrate(rhs, [p0], (0.0, 1000.0), 0.05)

    cache = {}

    def trajectory(kp, k1, p0):
        key = (kp, k1, p0)
        if key not in cache:
            cache[key] = _trajectory(kp, k1, p0)
        return cache[key]

    def oracle(X, consts=consts):
        ts, ys = trajectory(consts["kp"], consts["k1"], consts["p0"])
        P = np.interp(np.atleast_2d(X)[:, 0], ts, ys[:, 0])
        thC = _co_ox_theta(P, consts["k1"])
        return np.stack([P, thC, 1.0 - thC], axis=1)

    def generate(num_points, seed, consts=consts):
        ts, ys = trajectory(consts["kp"], consts["k1"], consts["p0"])
        idx = np.linspace(0, len(ts) - 1, num_points).round().astype(int)
        P = ys[idx, 0]
        thC = _co_ox_theta(P, consts["k1"])
        return ts[idx][:, None], np.stack([P, thC, 1.0 - thC], axis=1)

    def oracle_derivs(X, registry, consts=consts):
        Y = oracle(X)
        P = Y[:, 0]
        kp, k1 = consts["kp"], consts["k1"]
        dP = -kp * k1 * P / (1.0 + k1 * P)
        dthC = k1 / (1.0 + k1 * P) ** 2 * dP
        table = {0: dP, 1: dthC, 2: -dthC}
        return np.stack([table[v.output] for v in registry.vars], axis=1)

    return ProblemSpec(
        name="co_oxidation",
        axes=axes,
        n_y=3,
        output_names=["p_co", "theta_co", "theta_v"],
        constants=consts,
        estimable={},
        phys_defaults={},
        defaults=dict(
            num_epochs=5000, model_depth=4, hidden_dim=32, lr=1e-3,
            num_points=2000, pinn_reg_factor=1.0, hardnet_reg_factor=1.0,
            taylor_offset=0.01, taylor_order=1, eta=0.001,
            newton_step_length=1.0, max_newton_iter=10,
            noise_std=1.0, noise_mean=0.0, noise_scale=0.01,
            provenance="rk4",
        ),
        has_coupling=True,
        build_constraints=build,
        generate=generate,
        oracle=oracle,
        oracle_derivatives=oracle_derivs,
    )


def _lv_spec(name, estimable) -> ProblemSpec:
    axes = [Axis("t", 0.0, 50.0, is_time=True)]
    consts = {"alpha": 0.1, "beta": 0.02, "gamma": 0.4, "delta": 0.02}

    def build(reg, params):
        cs = ConstraintSet(n_y=2, registry=reg)
        x, y = sym.Output(0), sym.Output(1)
        cs.differential.append(reg.first(0, 0) - params["alpha"] * x + params["beta"] * x * y)
        cs.differential.append(reg.first(1, 0) + params["gamma"] * y - params["delta"] * x * y)
        return cs

    def rhs(t, s, c=consts):
        x, y = s
        return np.array(
            [c["alpha"] * x - c["beta"] * x * y, -c["gamma"] * y + c["delta"] * x * y]
        )

    cache = {}

    def trajectory():
        if "t" not in cache:
            cache["t"] = rk4_integrate(rhs, [10.0, 10.0], (0.0, 100.0), 0.01)
        return cache["t"]

    def oracle(X):
        ts, ys = trajectory()
        t = np.atleast_2d(X)[:, 0]
        return np.stack([np.interp(t, ts, ys[:, 0]), np.interp(t, ts, ys[:, 1])], axis=1)

    def generate(num_points, seed):
        ts, ys = trajectory()
        idx = np.linspace(0, len(ts) - 1, num_points).round().astype(int)
        return ts[idx][:, None], ys[idx]

    def oracle_derivs(X, registry):
        Y = oracle(X)
        d = np.stack([rhs(0.0, y) for y in Y])
        return np.stack([d[:, v.output] for v in registry.vars], axis=1)

    return ProblemSpec(
        name=name,
        axes=axes,
        n_y=2,
        output_names=["prey", "predator"],
        constants=consts,
        estimable=dict(consts) if estimable else {},
        phys_defaults={"alpha": 0.05, "beta": 0.01, "gamma": 0.2, "delta": 0.01},
        defaults=dict(
            num_epochs=5000 if not estimable else 50000,
            model_depth=4, hidden_dim=32, lr=3e-3,
            num_points=2000, pinn_reg_factor=1.0, hardnet_reg_factor=100.0,
            taylor_offset=0.1 if not estimable else 0.001,
            taylor_order=1, eta=1.0,
            newton_step_length=1.0, max_newton_iter=10,
            noise_std=1.0, noise_mean=0.0, noise_scale=0.0,
            provenance="rk4",
        ),
        has_coupling=True,
        build_constraints=build,
        generate=generate,
        oracle=oracle,
        oracle_derivatives=oracle_derivs,
    )


@register
def _lotka_volterra() -> ProblemSpec:
    return _lv_spec("lotka_volterra", estimable=False)


@register
def _lv_inverse() -> ProblemSpec:
    return _lv_spec("lv_inverse", estimable=True)


@register
def _pde_multisol() -> ProblemSpec:
    """Second-order PDE with two analytic branches; data follows the
    exponentially growing branch 6 e^(2 x1 + x2) + x1 x2^3."""
    axes = [Axis("x1", -1.0, 1.0), Axis("x2", -1.0, 1.0)]

    def build(reg, params):
        cs = ConstraintSet(n_y=1, registry=reg)
        x1, x2 = sym.Input(0), sym.Input(1)
        cs.differential.append(
            reg.second(0, 0) - 5.0 * reg.first(0, 1) + sym.Output(0)
            - x1 * x2 * x2 * (x2 - 15.0)
        )
        return cs

    def oracle(X):
        X = np.atleast_2d(X)
        e = 6.0 * np.exp(2.0 * X[:, 0] + X[:, 1])
        return (e + X[:, 0] * X[:, 1] ** 3)[:, None]

    def generate(num_points, seed):
        X = _subsample(_grid_2d(axes[0], axes[1], 45), num_points, seed)
        return X, oracle(X)

    def oracle_derivs(X, registry):
        X = np.atleast_2d(X)
        x1, x2 = X[:, 0], X[:, 1]
        e = 6.0 * np.exp(2.0 * x1 + x2)
        table = {
            (0, 1): 2.0 * e + x2**3,
            (1, 1): e + 3.0 * x1 * x2**2,
            (0, 2): 4.0 * e,
            (1, 2): e + 6.0 * x1 * x2,
        }
        return np.stack([table[(v.axis, v.order)] for v in registry.vars], axis=1)

    return ProblemSpec(
        name="pde_multisol",
        axes=axes,
        n_y=1,
        output_names=["y1"],
        constants={},
        estimable={},
        phys_defaults={},
        defaults=dict(
            num_epochs=5000, model_depth=4, hidden_dim=32, lr=1e-3,
            num_points=2000, pinn_reg_factor=1.0, hardnet_reg_factor=1.0,
            taylor_offset=0.01, taylor_order=2, eta=0.05,
            newton_step_length=1.0, max_newton_iter=10,
            noise_std=1.0, noise_mean=0.0, noise_scale=0.01,
            provenance="analytic",
        ),
        has_coupling=True,
        build_constraints=build,
        generate=generate,
        oracle=oracle,
        oracle_derivatives=oracle_derivs,
    )


@register
def _heat_1d() -> ProblemSpec:
    """Transient conduction in a rod: T_t = alpha T_xx with a sinusoidal
    initial profile and pinned ends."""
    l, n_zones, alpha = 5.0, 5, 1.0
    axes = [Axis("x1", 0.0, l), Axis("t", 0.0, 10.0, is_time=True)]
    w = n_zones * math.pi / l

    def build(reg, params):
        cs = ConstraintSet(n_y=1, registry=reg)
        cs.differential.append(reg.first(0, 1) - params["alpha"] * reg.second(0, 0))
        return cs

    def oracle(X):
        X = np.atleast_2d(X)
        return (np.sin(w * X[:, 0]) * np.exp(-alpha * w * w * X[:, 1]))[:, None]

    def generate(num_points, seed):
        X = _subsample(_grid_2d(axes[0], axes[1], 100), num_points, seed)
        return X, oracle(X)

    def oracle_derivs(X, registry):
        X = np.atleast_2d(X)
        s = np.sin(w * X[:, 0]) * np.exp(-alpha * w * w * X[:, 1])
        c = np.cos(w * X[:, 0]) * np.exp(-alpha * w * w * X[:, 1])
        table = {
            (0, 1): w * c,
            (0, 2): -w * w * s,
            (1, 1): -alpha * w * w * s,
            (1, 2): (alpha * w * w) ** 2 * s,
        }
        return np.stack([table[(v.axis, v.order)] for v in registry.vars], axis=1)

    conditions = [
        ConditionSpec(
            kind="bc",
            rows=[sym.Output(0) - sym.Const(0.0)],
            applies=lambda X: (np.abs(X[:, 0]) <= BOUNDARY_TOL)
            | (np.abs(X[:, 0] - l) <= BOUNDARY_TOL),
        ),
        ConditionSpec(
            kind="ic",
            rows=[sym.Output(0) - sym.sin(sym.Const(w) * sym.Input(0))],
            applies=lambda X: np.abs(X[:, 1]) <= BOUNDARY_TOL,
        ),
    ]

    return ProblemSpec(
        name="heat_1d",
        axes=axes,
        n_y=1,
        output_names=["temperature"],
        constants={"alpha": alpha},
        estimable={},
        phys_defaults={},
        defaults=dict(
            num_epochs=5000, model_depth=4, hidden_dim=32, lr=1e-3,
            num_points=5000, pinn_reg_factor=1.0, hardnet_reg_factor=1.0,
            taylor_offset=0.1, taylor_order=2, eta=0.005,
            newton_step_length=1.0, max_newton_iter=5,
            noise_std=1.0, noise_mean=0.0, noise_scale=0.01,
            provenance="analytic",
        ),
        has_coupling=True,
        build_constraints=build,
        generate=generate,
        oracle=oracle,
        oracle_derivatives=oracle_derivs,
        conditions=conditions,
    )
