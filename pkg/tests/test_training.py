"""Loss values, Adam algebra, noise injection, activation rule, and
finite-difference gradient checks through every traced program kind."""

import numpy as np
import pytest

from daehn import problems as prb
from daehn.kkt import ConstraintSet, TaylorCoupling, assemble_kkt
from daehn import symbolic as sym
from daehn.metrics import loss_daehn, loss_mlp, loss_pinn, mean_abs_violation
from daehn.network import BackboneConfig, init_params
from daehn.optimizers import AdamState, adam_step
from daehn.training import (
    TrainConfig,
    add_noise,
    build_program,
    compute_loss_grads,
    evaluate_metrics,
    loss_value,
    train,
)


class TestLossValues:
    def test_mlp_perfect_is_zero(self):
        assert loss_mlp([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0

    def test_mlp_unit_errors(self):
        assert loss_mlp([[1.0, 1.0]], [[0.0, 0.0]]) == 1.0

    def test_mlp_homogeneity(self):
        p = np.array([[0.3, -0.7], [1.1, 0.2]])
        t = np.zeros((2, 2))
        assert loss_mlp(2 * p, t) == pytest.approx(4 * loss_mlp(p, t))

    def test_pinn_exact_solution_physics_term_zero(self):
        spec = prb.build_problem("pde_multisol")
        constraints, registry = spec.constraints()
        X = np.array([[0.3, -0.5], [0.1, 0.9]])
        Y = spec.oracle(X)
        D = spec.oracle_derivatives(X, registry)
        full = loss_pinn(Y, D, Y, constraints, weight=1.0, inputs=X)
        assert full == pytest.approx(0.0, abs=1e-20)

    def test_pinn_weight_zero_equals_mlp(self):
        spec = prb.build_problem("pde_multisol")
        constraints, registry = spec.constraints()
        X = np.array([[0.3, -0.5]])
        Y_pred = np.array([[2.0]])
        Y = spec.oracle(X)
        D = np.zeros((1, len(registry)))
        assert loss_pinn(Y_pred, D, Y, constraints, 0.0, inputs=X) == pytest.approx(
            loss_mlp(Y_pred, Y)
        )

    def test_pinn_single_residual_arithmetic(self):
        cs = ConstraintSet(n_y=1, equalities=[sym.Output(0) - sym.Const(0.0)])
        # residual r = 2, weight 1, zero data error -> 4
        out = loss_pinn([[2.0]], None, [[2.0]], cs, 1.0)
        assert out == pytest.approx(4.0)

    def test_daehn_perfect_fit(self):
        class P:
            y_proj = np.array([[1.0, 2.0]])
            d_proj = np.array([[0.5, 0.25]])

        assert loss_daehn(P, P.d_proj, P.y_proj, omega=1.0) == 0.0

    def test_daehn_omega_zero(self):
        class P:
            y_proj = np.array([[1.0, 1.0]])
            d_proj = np.array([[9.0]])

        assert loss_daehn(P, np.array([[0.0]]), np.zeros((1, 2)), 0.0) == 1.0

    def test_daehn_componentwise(self):
        class P:
            y_proj = np.array([[1.0, 1.0]])
            d_proj = np.array([[1.0, 1.0, 1.0, 1.0]])

        out = loss_daehn(P, np.zeros((1, 4)), np.zeros((1, 2)), omega=1.0)
        assert out == pytest.approx(2.0)

    def test_daehn_unit_omega_is_spherical(self):
        # with omega=1 the two terms are identically weighted MSEs
        rng = np.random.default_rng(0)

        class P:
            y_proj = rng.normal(size=(5, 2))
            d_proj = rng.normal(size=(5, 2))

        ad = rng.normal(size=(5, 2))
        t = rng.normal(size=(5, 2))
        expect = loss_mlp(P.y_proj, t) + loss_mlp(P.d_proj, ad)
        assert loss_daehn(P, ad, t, 1.0) == pytest.approx(expect)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, -2.0])]
        st = AdamState(p)
        adam_step(p, [np.zeros(2)], st, lr=0.1)
        np.testing.assert_allclose(p[0], [1.0, -2.0])
        assert st.t == 1

    def test_first_step_is_signed_lr(self):
        p = [np.array([0.0, 0.0])]
        g = [np.array([0.3, -4.0])]
        st = AdamState(p)
        adam_step(p, g, st, lr=1e-3)
        np.testing.assert_allclose(p[0], [-1e-3, 1e-3], atol=1e-3 * 1e-6)

    def test_constant_gradient_update_shrinks(self):
        p = [np.array([0.0])]
        g = [np.array([2.0])]
        st = AdamState(p)
        adam_step(p, g, st, lr=1e-2)
        u1 = abs(p[0][0])
        before = p[0][0]
        adam_step(p, g, st, lr=1e-2)
        u2 = abs(p[0][0] - before)
        assert u2 <= u1 * (1 + 1e-6)


class TestNoise:
    def _dataset(self):
        spec = prb.build_problem("quadratic")
        return prb.generate_dataset(spec, 200, seed=3)

    def test_scale_zero_unchanged(self):
        ds = self._dataset()
        out = add_noise(ds, 0.0, 1.0, 0.0, seed=0)
        assert out.Y is ds.Y

    def test_seeded_determinism(self):
        ds = self._dataset()
        a = add_noise(ds, 0.0, 1.0, 0.05, seed=11)
        b = add_noise(ds, 0.0, 1.0, 0.05, seed=11)
        assert np.array_equal(a.Y, b.Y)

    def test_sample_mean_within_clt_bound(self):
        rng_targets = np.zeros((50000, 2))
        ds = prb.Dataset(
            X=np.zeros((50000, 1)), Y=rng_targets,
            split=np.array(["train"] * 50000), provenance="analytic",
        )
        out = add_noise(ds, 0.0, 1.0, 1.0, seed=5)
        n = out.Y.size
        assert abs(out.Y.mean()) <= 3.0 / np.sqrt(n)

    def test_inputs_untouched(self):
        ds = self._dataset()
        out = add_noise(ds, 0.0, 1.0, 0.1, seed=0)
        assert np.array_equal(out.X, ds.X)


def _tiny_cfg(model, problem="lotka_volterra", **kw):
    base = dict(
        problem=problem, model=model, num_epochs=20, model_depth=2,
        hidden_dim=8, lr=1e-3, num_points=40, eval_every=10,
        max_newton_iter=4, seed=1,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestActivationRule:
    def test_eta_inf_activates_immediately(self):
        rep = train(_tiny_cfg("daehn", eta=float("inf")))
        assert rep.activation_epoch == 0
        assert rep.rows[-1].metrics.mse_derivative is not None

    def test_eta_zero_never_activates(self):
        rep = train(_tiny_cfg("daehn", eta=0.0))
        assert rep.activation_epoch is None
        assert rep.rows[-1].metrics.mse_derivative is None


class _ProgramHarness:
    """Traced program + parameter vector round-trip for FD gradient checks.

    ``pretrain`` runs a few plain data-fit epochs first so the check happens
    away from the huge-curvature random-init regime where the central
    difference oracle itself loses accuracy.
    """

    def __init__(self, kind, problem, seed=0, n_points=24, pretrain=0, **cfg_kw):
        defaults = dict(
            problem=problem, model="daehn" if kind.startswith("daehn") else kind,
            num_epochs=1, model_depth=2, hidden_dim=6, lr=1e-3,
            num_points=n_points, max_newton_iter=4, seed=seed,
        )
        defaults.update(cfg_kw)
        self.cfg = TrainConfig(**defaults)
        spec = prb.build_problem(problem)
        ds = prb.generate_dataset(spec, n_points, seed)
        self.X, self.Y = ds.train
        estimate = dict(self.cfg.estimate_params)
        self.constraints, self.registry = spec.constraints(estimate=bool(estimate))
        coupling = (
            TaylorCoupling(self.cfg.taylor_offset, self.cfg.taylor_order, spec.n_in)
            if spec.has_coupling
            else None
        )
        self.system = assemble_kkt(self.constraints, coupling)
        phys = dict(spec.constants)
        phys.update(estimate)
        bcfg = BackboneConfig(
            spec.n_in, spec.n_y, self.system.n_mult + self.system.n_slack,
            self.cfg.hidden_dim, self.cfg.model_depth, seed=seed,
        )
        self.params = init_params(bcfg, phys_init=phys)
        self.params.set_input_stats(
            self.X.mean(axis=0), np.maximum(self.X.std(axis=0), 1e-12)
        )
        if pretrain:
            from daehn.optimizers import AdamState
            from daehn.training import epoch_step

            warm = build_program(
                "mlp", self.X, self.Y, self.params, spec, self.constraints,
                self.registry, coupling, self.system, self.cfg,
            )
            adam = AdamState(list(self.params.weights) + list(self.params.biases))
            for _ in range(pretrain):
                epoch_step(warm, self.params, adam, 3e-3, self.cfg.residual_tol)
        self.prog = build_program(
            kind, self.X, self.Y, self.params, spec, self.constraints,
            self.registry, coupling, self.system, self.cfg,
        )

    def loss_and_grads(self):
        loss, _, gsum = compute_loss_grads(self.prog, self.cfg.residual_tol)
        return loss, gsum

    def loss_at(self, flat):
        self.prog.tape.set_shared_vector(flat)
        return loss_value(self.prog)


@pytest.mark.parametrize(
    "kind,problem,cfg_kw",
    [
        ("mlp", "lotka_volterra", {}),
        ("pinn", "lotka_volterra", {}),
        ("daehn", "lotka_volterra", {}),
        ("daehn", "quadratic", {"pretrain": 120}),
        ("daehn", "lv_inverse", {"estimate_params": {"alpha": 0.07, "beta": 0.015,
                                                     "gamma": 0.3, "delta": 0.015}}),
    ],
)
def test_loss_gradient_matches_finite_differences(kind, problem, cfg_kw):
    h = _ProgramHarness(kind, problem, **cfg_kw)
    loss, grads = h.loss_and_grads()
    assert np.isfinite(loss)
    flat0 = h.prog.tape_params.flat_values(h.params)
    rng = np.random.default_rng(0)
    # random parameter subset, always including the physical parameters
    idx = list(rng.choice(len(flat0), size=min(10, len(flat0)), replace=False))
    idx += list(range(len(flat0) - len(h.prog.tape_params.phys_names), len(flat0)))
    step = 1e-6
    for i in sorted(set(int(j) for j in idx)):
        up = flat0.copy()
        dn = flat0.copy()
        up[i] += step
        dn[i] -= step
        fd = (h.loss_at(up) - h.loss_at(dn)) / (2 * step)
        denom = max(abs(fd), abs(grads[i]), 1e-6)
        assert abs(grads[i] - fd) / denom <= 1e-4, (i, grads[i], fd)
    h.loss_at(flat0)


def test_phys_params_receive_gradient():
    h = _ProgramHarness(
        "daehn", "lv_inverse",
        estimate_params={"alpha": 0.07, "beta": 0.015, "gamma": 0.3, "delta": 0.015},
    )
    _, grads = h.loss_and_grads()
    phys_slice = grads[-len(h.prog.tape_params.phys_names):]
    assert np.any(phys_slice != 0.0)


class TestMetricsEvaluation:
    def test_rmse_is_sqrt_mse(self):
        rep = train(_tiny_cfg("mlp"))
        m = rep.rows[-1].metrics
        assert m.rmse**2 == pytest.approx(m.mse_data, rel=1e-12)

    def test_true_solution_violation_tiny(self):
        spec = prb.build_problem("pde_multisol")
        constraints, registry = spec.constraints()
        X = prb.generate_dataset(spec, 100, 0).X
        Y = spec.oracle(X)
        D = spec.oracle_derivatives(X, registry)
        v = mean_abs_violation(constraints, X, Y, D)
        assert v <= 1e-10

    def test_converged_projection_violation_bounded(self):
        cfg = _tiny_cfg("daehn", eta=float("inf"), num_epochs=12)
        rep = train(cfg)
        m = rep.rows[-1].metrics
        assert m.nonconverged_fraction == 0.0
        assert m.abs_violation <= cfg.residual_tol * 10

    def test_violation_absent_without_constraints(self):
        cs = ConstraintSet(n_y=1)
        assert mean_abs_violation(cs, None, [[1.0]], None) is None


class TestReproducibility:
    def test_bitwise_replay(self):
        a = train(_tiny_cfg("daehn", eta=float("inf")))
        b = train(_tiny_cfg("daehn", eta=float("inf")))
        for wa, wb in zip(a.final_params.weights, b.final_params.weights):
            assert np.array_equal(wa, wb)
        ma, mb = a.rows[-1].metrics, b.rows[-1].metrics
        assert ma.mse_data == mb.mse_data
        assert ma.abs_violation == mb.abs_violation

    def test_divergence_is_reported(self):
        rep = train(_tiny_cfg("mlp", lr=1e6, num_epochs=200))
        # either diverges to non-finite loss (flagged) or survives; when
        # flagged the report carries the epoch note
        if rep.diverged:
            assert "non-finite" in rep.divergence_note


class TestBatchingAndDetach:
    def test_minibatch_runs_and_is_deterministic(self):
        cfg = _tiny_cfg("daehn", eta=float("inf"), batch_size=16, num_epochs=14)
        a = train(cfg)
        b = train(cfg)
        assert not a.diverged
        for wa, wb in zip(a.final_params.weights, b.final_params.weights):
            assert np.array_equal(wa, wb)

    def test_minibatch_differs_from_full_batch(self):
        full = train(_tiny_cfg("mlp", num_epochs=14))
        mini = train(_tiny_cfg("mlp", num_epochs=14, batch_size=16))
        assert not np.array_equal(full.final_params.weights[0],
                                  mini.final_params.weights[0])

    def test_detach_flag_trains_derivatives_only(self):
        rep = train(_tiny_cfg(
            "daehn", eta=float("inf"), detach_projected_targets=True,
            num_epochs=14,
        ))
        assert not rep.diverged
        assert rep.activation_epoch == 0

    def test_detach_with_minibatch_rejected(self):
        with pytest.raises(ValueError, match="full-batch"):
            train(_tiny_cfg(
                "daehn", eta=float("inf"), detach_projected_targets=True,
                batch_size=16,
            ))
