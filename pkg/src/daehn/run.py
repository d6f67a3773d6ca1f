"""Experiment orchestration: train, run inference with the projection pool,
emit every artifact, report per-segment wall-clock."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import problems as prb
from .autodiff import BACKEND
from .config import ExperimentConfig
from .kkt import TaylorCoupling, assemble_kkt
from .metrics import data_metrics, mean_abs_violation
from .network import (
    NetworkParams,
    bundle_batched,
    input_jacobian_batched,
    load_checkpoint,
    save_checkpoint,
)
from .outputs import (
    emit_curve_plots,
    emit_heatmap,
    emit_learning_curve,
    emit_metrics_json,
    emit_parity,
    emit_predictions,
)
from .projection import (
    newton_solve,
    fixed_bindings,
    solution_input_jacobian,
    warm_start,
)
from .training import TrainReport, train


class DivergenceError(RuntimeError):
    pass


@dataclass
class Inference:
    y_pred: np.ndarray
    d_ad: np.ndarray
    d_proj: Optional[np.ndarray]
    y_hat: np.ndarray
    converged: Optional[np.ndarray]
    bundle: object


class Experiment:
    """Problem, constraint system and projection pool for one trained model."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.spec = prb.build_problem(cfg.problem, cfg.problem_constants)
        estimate = dict(cfg.estimate_params)
        if not estimate and cfg.model == "daehn" and self.spec.estimable:
            estimate = dict(self.spec.phys_defaults)
        self.constraints, self.registry = self.spec.constraints(
            estimate=bool(estimate)
        )
        self.coupling = (
            TaylorCoupling(cfg.taylor_offset, cfg.taylor_order, self.spec.n_in)
            if self.spec.has_coupling
            else None
        )
        self.pool = prb.kkt_pool(self.spec, self.constraints, self.coupling)
        self.system = self.pool[(False, False)]

    def bundle(self, params, X):
        n_axes = self.coupling.n_axes if self.coupling is not None else 0
        delta = (
            self.coupling.delta if self.coupling is not None
            else self.cfg.taylor_offset
        )
        return bundle_batched(
            params, X, self.registry, delta, n_axes, n_slack=self.system.n_slack
        )

    def predict(self, params, X, projected: bool) -> Inference:
        """Model output at X; the projected path selects the per-point system
        from the boundary/initial pool."""
        bundle = self.bundle(params, X)
        if not projected:
            return Inference(
                y_pred=bundle.y_hat, d_ad=bundle.d_hat, d_proj=None,
                y_hat=bundle.y_hat, converged=None, bundle=bundle,
            )
        bc, ic = prb.classify_points(self.spec, X)
        y = np.empty_like(bundle.y_hat)
        d = np.empty_like(bundle.d_hat)
        conv = np.empty(len(X), dtype=bool)
        pcfg = self.cfg.projection()
        for pattern, system in self.pool.items():
            mask = (bc == pattern[0]) & (ic == pattern[1])
            if not mask.any():
                continue
            sub = _sub_bundle(bundle, mask)
            init = warm_start(system, sub)
            res = newton_solve(system, init, fixed_bindings(sub), pcfg)
            y[mask] = res.y_proj
            if d.size:
                d[mask] = res.d_proj
            conv[mask] = res.converged
        return Inference(
            y_pred=y, d_ad=bundle.d_hat, d_proj=d, y_hat=bundle.y_hat,
            converged=conv, bundle=bundle,
        )

    def model_input_jacobian(self, params, X, projected: bool):
        """d y_model / d inputs; differentiates through the projection at the
        solution when the layer is active."""
        J_hat = input_jacobian_batched(params, X)
        if not projected:
            return J_hat
        inf = self.predict(params, X, projected=True)
        res_init = warm_start(self.system, inf.bundle)
        res = newton_solve(
            self.system, res_init, fixed_bindings(inf.bundle), self.cfg.projection()
        )
        z = np.concatenate(
            [res.y_proj, res.d_proj, res.multipliers, res.slacks], axis=1
        )
        dneigh = None
        if self.coupling is not None:
            n_axes = self.coupling.n_axes
            dneigh = np.empty((len(X), n_axes, self.spec.n_y, self.spec.n_in))
            for axis in range(n_axes):
                Xs = X.copy()
                Xs[:, axis] += self.coupling.delta
                dneigh[:, axis] = input_jacobian_batched(params, Xs)
        return solution_input_jacobian(
            self.system, z, fixed_bindings(inf.bundle), J_hat, dneigh,
            self.cfg.projection(),
        )


def _sub_bundle(bundle, mask):
    class _B:
        pass

    b = _B()
    b.inputs = bundle.inputs[mask]
    b.y_hat = bundle.y_hat[mask]
    b.lambda_hat = bundle.lambda_hat[mask]
    b.d_hat = bundle.d_hat[mask]
    b.neighbor_evals = bundle.neighbor_evals[mask]
    b.params = bundle.params
    return b


def _metrics_dict(m, model="daehn"):
    if m is None:
        return None
    d = m.as_dict()
    if model != "daehn":
        d.pop("mse_derivative", None)  # key present iff the model projects
    return d


def per_point_violation(constraints, X, Y, D, params=None):
    from .symbolic import Bindings
    from .kkt import smallest_signed_violation

    rows = constraints.all_rows()
    if not rows:
        return np.zeros(len(X))
    b = Bindings(
        inputs=list(np.atleast_2d(X).T),
        outputs=list(np.atleast_2d(Y).T),
        derivs=list(np.atleast_2d(D).T) if D is not None and D.size else None,
        params=params or {},
    )
    res = smallest_signed_violation(constraints, b)
    nd, ne = constraints.n_diff, constraints.n_eq
    total = np.zeros(len(X))
    for i, r in enumerate(res):
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), (len(X),))
        total += np.maximum(r, 0.0) if i >= nd + ne else np.abs(r)
    return total / len(res)


def run_experiment(config: ExperimentConfig) -> dict:
    """Train (or load), emit artifacts into out_dir, return the metrics
    payload.  Raises DivergenceError on non-finite training loss and OSError
    on I/O failure."""
    cfg = config.train
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = Experiment(cfg)
    spec = exp.spec

    report: Optional[TrainReport] = None
    if config.load_checkpoint:
        params = load_checkpoint(config.load_checkpoint)
        best_params = params
        projected = cfg.model == "daehn" and params.activated
        activation_epoch = None
    else:
        report = train(cfg, problem=spec)
        if report.diverged:
            raise DivergenceError(report.divergence_note)
        params = report.final_params
        best_params = report.best_params
        projected = cfg.model == "daehn" and report.activation_epoch is not None
        activation_epoch = report.activation_epoch
        best_params.activated = projected
        params.activated = projected

    dataset = prb.generate_dataset(spec, cfg.num_points, cfg.seed)
    from .training import add_noise

    dataset = add_noise(
        dataset, cfg.noise_mean, cfg.noise_std, cfg.noise_scale, cfg.seed + 7
    )
    Xtr, Ytr = dataset.train
    Xval, Yval = dataset.val

    t_art = time.perf_counter()
    bypass = config.inference_bypass_projection
    inf_val = exp.predict(best_params, Xval, projected and not bypass)
    inf_tr = exp.predict(best_params, Xtr, projected and not bypass)

    # learning curve + plots
    if report is not None:
        emit_learning_curve(report.rows, out / "learning_curve.csv")
        if config.emit_plots:
            emit_curve_plots(report.rows, out)

    # predictions over the full dataset, split-tagged
    X_all = np.concatenate([Xtr, Xval])
    Y_all = np.concatenate([Ytr, Yval])
    pred_all = np.concatenate([inf_tr.y_pred, inf_val.y_pred])
    split_all = ["train"] * len(Xtr) + ["val"] * len(Xval)
    emit_predictions(
        [a.name for a in spec.axes], spec.output_names,
        X_all, Y_all, pred_all, split_all, out / "predictions.csv",
    )

    # parity on the validation split
    pairs = []
    for p, name in enumerate(spec.output_names):
        pairs.append((name, Yval[:, p], inf_val.y_pred[:, p]))
    if len(exp.registry):
        d_true = spec.oracle_derivatives(Xval, exp.registry)
        for q in range(len(exp.registry)):
            label = exp.registry.label(q)
            pairs.append((f"{label}[ad]", d_true[:, q], inf_val.d_ad[:, q]))
            if projected and inf_val.d_proj is not None and not bypass:
                pairs.append(
                    (f"{label}[proj]", d_true[:, q], inf_val.d_proj[:, q])
                )
    elif spec.oracle_jacobian is not None:
        J_true = spec.oracle_jacobian(Xval)
        J_model = exp.model_input_jacobian(best_params, Xval, projected and not bypass)
        for p, name in enumerate(spec.output_names):
            for a, ax in enumerate(spec.axes):
                pairs.append(
                    (f"d{name}/d{ax.name}[model]", J_true[:, p, a], J_model[:, p, a])
                )
    emit_parity(pairs, out / "parity.csv")

    # heatmap for two-input problems
    if spec.n_in == 2:
        g = 100
        a0, a1 = spec.axes
        u = np.linspace(a0.lo, a0.hi, g)
        v = np.linspace(a1.lo, a1.hi, g)
        U, V = np.meshgrid(u, v, indexing="ij")
        Xg = np.stack([U.ravel(), V.ravel()], axis=1)
        Yg = spec.oracle(Xg)
        inf_g = exp.predict(best_params, Xg, projected and not bypass)
        D_for_viol = inf_g.d_proj if (projected and not bypass) else inf_g.d_ad
        viol = per_point_violation(
            exp.constraints, Xg, inf_g.y_pred, D_for_viol,
            params=dict(best_params.phys),
        )
        err = np.abs(inf_g.y_pred - Yg).mean(axis=1)
        emit_heatmap(
            zip(Xg[:, 0], Xg[:, 1], Yg[:, 0], inf_g.y_pred[:, 0], err, viol),
            out / "heatmap.csv",
        )

    save_checkpoint(out / "checkpoint.npz", best_params)

    # metrics payload
    from .training import evaluate_metrics

    m_val = evaluate_metrics(
        spec, best_params, exp.constraints, exp.registry, exp.coupling,
        exp.system, cfg, Xval, Yval, projected=projected and not bypass,
    )
    m_tr = evaluate_metrics(
        spec, best_params, exp.constraints, exp.registry, exp.coupling,
        exp.system, cfg, Xtr, Ytr, projected=projected and not bypass,
    )
    payload = {
        "problem": cfg.problem,
        "model": cfg.model,
        "kernel_backend": BACKEND,
        "activation_epoch": activation_epoch,
        "best": {
            "epoch": report.best_epoch if report else None,
            "train": _metrics_dict(m_tr, cfg.model),
            "val": _metrics_dict(m_val, cfg.model),
        },
        "final": {
            "train": _metrics_dict(report.final_metrics("train"), cfg.model)
            if report else None,
            "val": _metrics_dict(report.final_metrics("val"), cfg.model)
            if report else None,
        },
        "timing_seconds": dict(report.timing) if report else {},
        "phys_params": {
            k: best_params.phys[k] for k in sorted(best_params.phys)
        },
    }
    if spec.estimable:
        payload["phys_true"] = dict(spec.estimable)
    if report is not None and report.phys_trajectory:
        payload["phys_trajectory"] = [
            {"epoch": e, **{k: float(v) for k, v in d.items()}}
            for e, d in report.phys_trajectory
        ]

    if cfg.model == "daehn" and projected:
        proj_val = exp.predict(best_params, Xval, projected=True)
        gap = np.abs(proj_val.y_pred - proj_val.y_hat).max(axis=1)
        mse_proj, _ = data_metrics(proj_val.y_pred, Yval)
        mse_byp, _ = data_metrics(proj_val.y_hat, Yval)
        payload["bypass"] = {
            "enabled": bool(bypass),
            "mean_inf_gap": float(gap.mean()),
            "max_inf_gap": float(gap.max()),
            "mse_data_projected": mse_proj,
            "mse_data_bypass": mse_byp,
            "relative_mse_change": float(
                abs(mse_byp - mse_proj) / max(mse_proj, 1e-300)
            ),
        }
    payload["timing_seconds"]["artifacts"] = time.perf_counter() - t_art
    emit_metrics_json(payload, out / "metrics.json")
    return payload
