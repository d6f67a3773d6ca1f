"""Training loop: traced loss programs, Adam updates, dynamic projection
activation, and metric evaluation.

One tape per (model kind, split) holds the whole per-epoch computation for
the full training batch: backbone forward, forward-mode input derivatives,
neighbor evaluations, and (after activation) the unrolled Newton projection.
Epochs replay the tape with fresh parameter leaf values, seed the loss
cotangents, and reverse-sweep for gradients, so the per-epoch Python overhead
is a handful of kernel calls.

The projected-loss phase activates once the running validation data MSE first
drops to the ``eta`` threshold (checked at evaluation epochs, latching); until
then the model trains with the penalty loss.  ``eta = inf`` activates
immediately, ``eta = 0`` never activates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import network as net
from . import problems as prb
from .autodiff import duals
from .autodiff.tape import Tape
from .kkt import TaylorCoupling, assemble_kkt
from .metrics import Metrics, data_metrics, mean_abs_violation
from .network import BackboneConfig, NetworkParams, bundle_batched, init_params
from .optimizers import AdamState, adam_step
from .projection import (
    ProjectionConfig,
    fixed_bindings,
    project_batch,
    project_differentiable,
)
from .symbolic import Bindings, evaluate

MODELS = ("mlp", "pinn", "daehn")


@dataclass
class TrainConfig:
    problem: str
    model: str
    num_epochs: int
    model_depth: int
    hidden_dim: int
    lr: float
    num_points: int
    pinn_reg_factor: float = 1.0
    hardnet_reg_factor: float = 1.0
    taylor_offset: float = 0.1
    taylor_order: int = 1
    eta: float = 0.01
    newton_step_length: float = 1.0
    max_newton_iter: int = 10
    noise_std: float = 1.0
    noise_mean: float = 0.0
    noise_scale: float = 0.0
    seed: int = 0
    eval_every: int = 10
    residual_tol: float = 1e-10
    jacobian_regularization: float = 1e-10
    batch_size: int = 0  # 0 = full training split
    detach_projected_targets: bool = False
    estimate_params: dict = field(default_factory=dict)
    problem_constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.taylor_order not in (1, 2):
            raise ValueError("taylor_order must be 1 or 2")
        if not (0.001 <= self.taylor_offset <= 0.1):
            raise ValueError("taylor_offset must lie in [0.001, 0.1]")
        for name in ("num_epochs", "model_depth", "hidden_dim", "num_points",
                     "max_newton_iter", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr", "residual_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("pinn_reg_factor", "hardnet_reg_factor", "noise_scale",
                     "noise_std", "eta", "jacobian_regularization"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 < self.newton_step_length <= 1.0):
            raise ValueError("newton_step_length must be in (0, 1]")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")

    def projection(self) -> ProjectionConfig:
        return ProjectionConfig(
            newton_step_length=self.newton_step_length,
            max_newton_iter=self.max_newton_iter,
            residual_tol=self.residual_tol,
            jacobian_regularization=self.jacobian_regularization,
        )


@dataclass
class CurveRow:
    epoch: int
    split: str
    metrics: Metrics


@dataclass
class TrainReport:
    config: TrainConfig
    rows: list
    best_epoch: int
    best_params: NetworkParams
    final_params: NetworkParams
    activation_epoch: Optional[int]
    phys_trajectory: list  # (epoch, dict) when estimating
    timing: dict
    diverged: bool = False
    divergence_note: str = ""
    loss_curve: list = field(default_factory=list)  # (epoch, loss)

    def best_metrics(self, split):
        rows = [r for r in self.rows if r.split == split and r.epoch == self.best_epoch]
        return rows[0].metrics if rows else None

    def final_metrics(self, split):
        rows = [r for r in self.rows if r.split == split]
        return rows[-1].metrics if rows else None


def add_noise(dataset: prb.Dataset, mean, std, scale, seed) -> prb.Dataset:
    """targets + scale * N(mean, std^2) per element; inputs untouched."""
    if scale < 0:
        raise ValueError("noise scale must be >= 0")
    if scale == 0:
        return dataset
    rng = np.random.default_rng(seed)
    noise = scale * rng.normal(loc=mean, scale=std, size=dataset.Y.shape)
    return prb.Dataset(
        X=dataset.X, Y=dataset.Y + noise, split=dataset.split,
        provenance=dataset.provenance,
    )


# ------------------------------------------------------------- traced programs
class TapeParams:
    """Network/physical parameters as shared tape slots, with the bookkeeping
    to push fresh values in (one vectorized write per epoch) and pull the
    per-slot gradient vector out."""

    def __init__(self, tape: Tape, params: NetworkParams, estimate_names):
        self.tape = tape
        self.slot0 = tape.n_shared
        self.weight_refs = [
            [[tape.shared(w) for w in row] for row in W] for W in params.weights
        ]
        self.bias_refs = [
            [tape.shared(b) for b in bvec] for bvec in params.biases
        ]
        self.phys_names = sorted(n for n in params.phys if n in estimate_names)
        self.phys_refs = {n: tape.shared(params.phys[n]) for n in self.phys_names}
        self.n_slots = tape.n_shared - self.slot0

    def phys_payloads(self, params: NetworkParams):
        """Physical-parameter bindings: slot refs for learnable ones, plain
        floats for the rest."""
        out = dict(params.phys)
        out.update(self.phys_refs)
        return out

    def flat_values(self, params: NetworkParams):
        parts = [w.ravel() for w in params.weights] + list(params.biases)
        if self.phys_names:
            parts.append(np.array([params.phys[n] for n in self.phys_names]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_values(self, params: NetworkParams):
        self.tape.set_shared_vector(self.flat_values(params))

    def split_grads(self, slot_grads, params: NetworkParams):
        """Slot-gradient vector -> (weight/bias grad arrays, phys grads)."""
        flat = slot_grads[self.slot0 : self.slot0 + self.n_slots]
        out = []
        k = 0
        for W in params.weights:
            out.append(flat[k : k + W.size].reshape(W.shape))
            k += W.size
        for b in params.biases:
            out.append(flat[k : k + b.size])
            k += b.size
        phys = {}
        for n in self.phys_names:
            phys[n] = float(flat[k])
            k += 1
        return out, phys


@dataclass
class LossTerm:
    refs: list
    coeff: float  # weight / (batch * n_refs)
    kind: str = "sq"  # sq | relu_sq
    label: str = "data"


@dataclass
class TracedProgram:
    tape: Tape
    tape_params: TapeParams
    terms: list
    targets: np.ndarray
    x_refs: list = field(default_factory=list)  # coordinate leaves
    t_refs: list = field(default_factory=list)  # target leaves
    proj_residual: list = field(default_factory=list)  # refs, daehn only
    const_loss: float = 0.0
    detach_refs: dict = field(default_factory=dict)  # leaf refs refreshed per epoch


def _dual_forward(tape, tp, params, x_refs, registry, n_axes, delta, need_axes):
    """Per-axis dual passes over the traced backbone; returns y refs, lambda
    refs, derivative refs (registry order), neighbor ref table."""
    cfg = params.config
    zs = [
        (x_refs[i] - params.input_mu[i]) * (1.0 / params.input_sigma[i])
        for i in range(cfg.input_dim)
    ]
    need2 = {v.axis for v in registry.vars if v.order == 2}
    y_refs = lam_refs = None
    d1, d2 = {}, {}
    for axis in sorted(need_axes):
        seed = 1.0 / params.input_sigma[axis]
        mk = duals.Dual2 if axis in need2 else duals.Dual
        xs = [mk(z, seed if i == axis else 0.0) for i, z in enumerate(zs)]
        ys, lams = net.apply_mlp(tp.weight_refs, tp.bias_refs, xs, cfg.output_dim)
        if y_refs is None:
            y_refs = [y.v for y in ys]
            lam_refs = [l.v for l in lams]
        for p, y in enumerate(ys):
            d1[(p, axis)] = y.d1
            if axis in need2:
                d2[(p, axis)] = y.d2
    if y_refs is None:  # no derivative variables at all
        y_refs, lam_refs = net.apply_mlp(tp.weight_refs, tp.bias_refs, zs, cfg.output_dim)
    d_refs = [
        (d1 if v.order == 1 else d2)[(v.output, v.axis)] for v in registry.vars
    ]
    neighbors = []
    for axis in range(n_axes):
        shifted = list(zs)
        shifted[axis] = shifted[axis] + delta / params.input_sigma[axis]
        ys, _ = net.apply_mlp(tp.weight_refs, tp.bias_refs, shifted, cfg.output_dim)
        neighbors.append(ys)
    return y_refs, lam_refs, d_refs, neighbors


def build_program(
    kind: str,
    X: np.ndarray,
    Y: np.ndarray,
    params: NetworkParams,
    spec: prb.ProblemSpec,
    constraints,
    registry,
    coupling: Optional[TaylorCoupling],
    system,
    cfg: TrainConfig,
) -> TracedProgram:
    """Trace one full-batch loss program.

    kind: "mlp" (data loss), "pinn" (data + penalty), "daehn" (projected),
    "daehn_detached" (projected values as constants, gradient through the
    propagated derivatives only).
    """
    B = len(X)
    tape = Tape(batch=B)
    tp = TapeParams(tape, params, set(cfg.estimate_params))
    x_refs = [tape.input(X[:, i].copy()) for i in range(spec.n_in)]
    t_targets = [tape.input(Y[:, p].copy()) for p in range(spec.n_y)]
    phys = tp.phys_payloads(params)
    n_y = spec.n_y

    terms = []
    proj_residual = []
    detach_refs = {}
    const_loss = 0.0

    tape.label_start("backbone_ad")
    if kind == "mlp":
        zs = [
            (x_refs[i] - params.input_mu[i]) * (1.0 / params.input_sigma[i])
            for i in range(spec.n_in)
        ]
        y_refs, _ = net.apply_mlp(tp.weight_refs, tp.bias_refs, zs, n_y)
        terms.append(LossTerm(
            refs=[y_refs[p] - t_targets[p] for p in range(n_y)],
            coeff=1.0 / (B * n_y), label="data",
        ))
    elif kind == "pinn":
        need_axes = {v.axis for v in registry.vars}
        y_refs, _, d_refs, _ = _dual_forward(
            tape, tp, params, x_refs, registry, 0, cfg.taylor_offset, need_axes
        )
        terms.append(LossTerm(
            refs=[y_refs[p] - t_targets[p] for p in range(n_y)],
            coeff=1.0 / (B * n_y), label="data",
        ))
        rows = constraints.all_rows()
        if rows:
            b = Bindings(
                inputs=x_refs, outputs=y_refs, derivs=d_refs, params=phys
            )
            memo = {}
            res = [evaluate(e, b, memo) for e in rows]
            m = len(res)
            ndiff_eq = constraints.n_diff + constraints.n_eq
            eqs = [r for r in res[:ndiff_eq]]
            ineqs = [r for r in res[ndiff_eq:]]
            w = cfg.pinn_reg_factor
            if eqs:
                terms.append(LossTerm(refs=eqs, coeff=w / (B * m), label="physics"))
            if ineqs:
                terms.append(LossTerm(
                    refs=ineqs, coeff=w / (B * m), kind="relu_sq", label="physics"
                ))
    elif kind in ("daehn", "daehn_detached"):
        n_axes = coupling.n_axes if coupling is not None else 0
        need_axes = {v.axis for v in registry.vars}
        y_refs, lam_refs, d_refs, neighbors = _dual_forward(
            tape, tp, params, x_refs, registry, n_axes, cfg.taylor_offset, need_axes
        )
        n_slack = system.n_slack
        if n_slack:
            lam_refs = lam_refs[:-n_slack] + [
                duals.softplus(s) for s in lam_refs[-n_slack:]
            ]
        if kind == "daehn":
            tape.mark("projection")
            fixed = Bindings(
                inputs=x_refs,
                y_hat=y_refs,
                neighbors=neighbors if neighbors else None,
                params=phys,
            )
            init = list(y_refs) + list(d_refs) + list(lam_refs)
            traced = project_differentiable(tape, system, init, fixed, cfg.projection())
            proj_residual = traced.residual
            y_out, d_out = traced.y, traced.d
            terms.append(LossTerm(
                refs=[y_out[p] - t_targets[p] for p in range(n_y)],
                coeff=1.0 / (B * n_y), label="data",
            ))
            if d_out:
                terms.append(LossTerm(
                    refs=[d_out[q] - d_refs[q] for q in range(len(d_refs))],
                    coeff=cfg.hardnet_reg_factor / (B * len(d_refs)),
                    label="derivative",
                ))
        else:
            # projected values enter as constants; only the propagated
            # derivatives carry gradient
            for q in range(len(d_refs)):
                leaf = tape.input(np.zeros(B))
                detach_refs[f"d_proj_{q}"] = leaf
                terms.append(LossTerm(
                    refs=[d_refs[q] - leaf],
                    coeff=cfg.hardnet_reg_factor / (B * max(len(d_refs), 1)),
                    label="derivative",
                ))
    else:
        raise ValueError(f"unknown program kind {kind!r}")

    tape.freeze()
    return TracedProgram(
        tape=tape, tape_params=tp, terms=terms, targets=Y,
        x_refs=x_refs, t_refs=t_targets,
        proj_residual=proj_residual, const_loss=const_loss,
        detach_refs=detach_refs,
    )


def compute_loss_grads(prog: TracedProgram, residual_tol: float, timers=None):
    """Replay + reverse; returns (loss, nonconv_fraction, slot_grads)."""
    terms = prog.terms
    watch = [r for t in terms for r in t.refs] + list(prog.proj_residual)

    def seed_fn(chunk_vals, sl):
        seeds = {}
        loss = 0.0
        for t in terms:
            for r in t.refs:
                v = chunk_vals[r.idx]
                if t.kind == "relu_sq":
                    v = np.maximum(v, 0.0)
                loss += t.coeff * float(v @ v)
                s = (2.0 * t.coeff) * v
                if r in seeds:
                    seeds[r] = seeds[r] + s
                else:
                    seeds[r] = s
        return seeds, loss

    vals, _, gsum, loss = prog.tape.run(
        watch=watch, seeds=seed_fn, shared_grads=True, timers=timers,
    )
    loss += prog.const_loss
    nonconv = 0.0
    if prog.proj_residual:
        res = np.max(
            np.abs(np.stack([vals[r.idx] for r in prog.proj_residual])), axis=0
        )
        nonconv = float(np.mean(res > residual_tol))
    return loss, nonconv, gsum


def loss_value(prog: TracedProgram) -> float:
    """Forward-only loss replay (no gradients)."""
    terms = prog.terms
    watch = [r for t in terms for r in t.refs]
    vals, _, _, _ = prog.tape.run(watch=watch)
    loss = prog.const_loss
    for t in terms:
        for r in t.refs:
            v = vals[r.idx]
            if t.kind == "relu_sq":
                v = np.maximum(v, 0.0)
            loss += t.coeff * float(v @ v)
    return loss


def epoch_step(prog: TracedProgram, params: NetworkParams, adam: AdamState,
               lr: float, residual_tol: float, timers=None):
    """One replay + reverse + Adam update.  Returns (loss, nonconv_fraction)."""
    loss, nonconv, gsum = compute_loss_grads(prog, residual_tol, timers)
    if not np.isfinite(loss):
        return loss, nonconv
    grads_flat, phys_grads = prog.tape_params.split_grads(gsum, params)
    arrays = list(params.weights) + list(params.biases)
    if prog.tape_params.phys_names:
        phys_vec = np.array([params.phys[n] for n in prog.tape_params.phys_names])
        arrays.append(phys_vec)
        grads_flat.append(
            np.array([phys_grads[n] for n in prog.tape_params.phys_names])
        )
    adam_step(arrays, grads_flat, adam, lr)
    if prog.tape_params.phys_names:
        for n, v in zip(prog.tape_params.phys_names, arrays[-1]):
            params.phys[n] = float(v)
    prog.tape_params.set_values(params)
    return loss, nonconv


# ------------------------------------------------------------------ evaluation
def evaluate_split(
    spec, params, constraints, registry, coupling, system, cfg: TrainConfig,
    X, Y, projected: bool,
):
    """Metrics on one split; the projected path runs the inference Newton
    solve and reports violation with the projected derivative variables."""
    n_axes = coupling.n_axes if coupling is not None else 0
    delta = coupling.delta if coupling is not None else cfg.taylor_offset
    bundle = bundle_batched(
        params, X, registry, delta, n_axes, n_slack=system.n_slack
    )
    if projected:
        res = project_batch(bundle, system, cfg.projection())
        mse, rmse = data_metrics(res.y_proj, Y)
        viol = mean_abs_violation(
            constraints, X, res.y_proj, res.d_proj, params=bundle.params
        )
        mse_d = (
            float(np.mean((res.d_proj - bundle.d_hat) ** 2))
            if res.d_proj.size
            else None
        )
        return Metrics(
            mse_data=mse, rmse=rmse, abs_violation=viol, mse_derivative=mse_d,
            nonconverged_fraction=float(np.mean(~res.converged)),
        ), res, bundle
    mse, rmse = data_metrics(bundle.y_hat, Y)
    viol = mean_abs_violation(
        constraints, X, bundle.y_hat, bundle.d_hat, params=bundle.params
    )
    return Metrics(mse_data=mse, rmse=rmse, abs_violation=viol), None, bundle


def evaluate_metrics(
    spec, params, constraints, registry, coupling, system, cfg, X, Y, projected
) -> Metrics:
    return evaluate_split(
        spec, params, constraints, registry, coupling, system, cfg, X, Y, projected
    )[0]


# ---------------------------------------------------------------------- train
def train(config: TrainConfig, dataset: Optional[prb.Dataset] = None,
          problem: Optional[prb.ProblemSpec] = None) -> TrainReport:
    spec = problem or prb.build_problem(config.problem, config.problem_constants)
    if dataset is None:
        dataset = prb.generate_dataset(spec, config.num_points, config.seed)
    dataset = add_noise(
        dataset, config.noise_mean, config.noise_std, config.noise_scale,
        config.seed + 7,
    )
    Xtr, Ytr = dataset.train
    Xval, Yval = dataset.val

    estimate = dict(config.estimate_params)
    if not estimate and config.model == "daehn" and spec.estimable:
        estimate = dict(spec.phys_defaults)
    constraints, registry = spec.constraints(estimate=bool(estimate))
    coupling = (
        TaylorCoupling(config.taylor_offset, config.taylor_order, spec.n_in)
        if spec.has_coupling
        else None
    )
    system = assemble_kkt(constraints, coupling)

    phys_init = dict(spec.constants)
    phys_init.update(estimate)
    bcfg = BackboneConfig(
        input_dim=spec.n_in,
        output_dim=spec.n_y,
        multiplier_dim=system.n_mult + system.n_slack,
        hidden_dim=config.hidden_dim,
        model_depth=config.model_depth,
        seed=config.seed,
    )
    params = init_params(bcfg, phys_init=phys_init)
    params.set_input_stats(Xtr.mean(axis=0), np.maximum(Xtr.std(axis=0), 1e-12))
    cfg = replace(config, estimate_params=estimate)

    activated = config.model == "daehn" and config.eta == float("inf")
    activation_epoch = 0 if activated else None
    start_kind = {
        "mlp": "mlp",
        "pinn": "pinn",
        "daehn": (
            ("daehn_detached" if cfg.detach_projected_targets else "daehn")
            if activated
            else "pinn"
        ),
    }[config.model]

    # batch slicing: equal-width batches keep the traced program's column
    # count fixed; a short remainder batch is dropped
    bs = cfg.batch_size if 0 < cfg.batch_size < len(Xtr) else len(Xtr)
    if cfg.detach_projected_targets and bs != len(Xtr):
        raise ValueError("detach_projected_targets requires full-batch training")
    batches = [(Xtr[i : i + bs], Ytr[i : i + bs]) for i in range(0, len(Xtr) - bs + 1, bs)]

    def make_program(kind):
        return build_program(
            kind, batches[0][0], batches[0][1], params, spec, constraints,
            registry, coupling, system, cfg,
        )

    def run_epoch(prog):
        total_loss, total_nonconv = 0.0, 0.0
        for bx, by in batches:
            if len(batches) > 1:
                for i, ref in enumerate(prog.x_refs):
                    prog.tape.set_input(ref, bx[:, i].copy())
                for p, ref in enumerate(prog.t_refs):
                    prog.tape.set_input(ref, by[:, p].copy())
            loss, nonconv = epoch_step(
                prog, params, adam, config.lr, config.residual_tol, tape_timers
            )
            if not np.isfinite(loss):
                return loss, nonconv
            total_loss += loss
            total_nonconv += nonconv
        return total_loss / len(batches), total_nonconv / len(batches)

    prog = make_program(start_kind)
    adam = AdamState(list(params.weights) + list(params.biases) + (
        [np.zeros(len(prog.tape_params.phys_names))] if prog.tape_params.phys_names else []
    ))

    rows, loss_curve, phys_traj = [], [], []
    best_epoch, best_val, best_params = 0, np.inf, params.copy()
    timing = {"epochs": 0.0, "evaluation": 0.0}
    tape_timers = {}
    diverged = False
    note = ""

    for epoch in range(1, config.num_epochs + 1):
        t0 = time.perf_counter()
        if prog.detach_refs:
            _refresh_detached(prog, params, spec, registry, coupling, system, cfg, Xtr)
        loss, nonconv = run_epoch(prog)
        timing["epochs"] += time.perf_counter() - t0
        if not np.isfinite(loss):
            diverged = True
            note = f"non-finite loss at epoch {epoch}"
            break
        loss_curve.append((epoch, loss))

        if epoch % config.eval_every == 0 or epoch == config.num_epochs:
            t1 = time.perf_counter()
            m_tr = evaluate_metrics(
                spec, params, constraints, registry, coupling, system, cfg,
                Xtr, Ytr, projected=activated,
            )
            m_val = evaluate_metrics(
                spec, params, constraints, registry, coupling, system, cfg,
                Xval, Yval, projected=activated,
            )
            timing["evaluation"] += time.perf_counter() - t1
            rows.append(CurveRow(epoch, "train", m_tr))
            rows.append(CurveRow(epoch, "val", m_val))
            if prog.tape_params.phys_names:
                phys_traj.append(
                    (epoch, {n: params.phys[n] for n in prog.tape_params.phys_names})
                )
            if m_val.mse_data < best_val:
                best_val = m_val.mse_data
                best_epoch = epoch
                best_params = params.copy()
            if (
                config.model == "daehn"
                and not activated
                and m_val.mse_data <= config.eta
            ):
                activated = True
                activation_epoch = epoch
                prog = make_program(
                    "daehn_detached" if cfg.detach_projected_targets else "daehn"
                )

    timing.update(tape_timers)
    return TrainReport(
        config=cfg,
        rows=rows,
        best_epoch=best_epoch,
        best_params=best_params,
        final_params=params,
        activation_epoch=activation_epoch,
        phys_trajectory=phys_traj,
        timing=timing,
        diverged=diverged,
        divergence_note=note,
        loss_curve=loss_curve,
    )


def _refresh_detached(prog, params, spec, registry, coupling, system, cfg, X):
    """Re-project with current weights and load the projected derivative
    values into the detached leaves."""
    n_axes = coupling.n_axes if coupling is not None else 0
    bundle = bundle_batched(
        params, X, registry, coupling.delta if coupling else cfg.taylor_offset,
        n_axes, n_slack=system.n_slack,
    )
    res = project_batch(bundle, system, cfg.projection())
    for q in range(res.d_proj.shape[1]):
        prog.tape.set_input(prog.detach_refs[f"d_proj_{q}"], res.d_proj[:, q])
    prog.const_loss = float(np.mean((res.y_proj - prog.targets) ** 2))
