"""Newton projection checks against closed-form and offline-solved oracles."""

import numpy as np
import pytest

from daehn import symbolic as sym
from daehn.autodiff.tape import Tape
from daehn.kkt import ConstraintSet, TaylorCoupling, assemble_kkt
from daehn.projection import (
    ProjectionConfig,
    fixed_bindings,
    newton_solve,
    project_batch,
    project_differentiable,
    solution_input_jacobian,
    warm_start,
)
from daehn.symbolic import Bindings


class Bundle:
    def __init__(self, inputs, y_hat, lambda_hat, d_hat=None, neighbor_evals=None, params=None):
        self.inputs = np.atleast_2d(inputs)
        self.y_hat = np.atleast_2d(y_hat)
        self.lambda_hat = np.atleast_2d(lambda_hat)
        self.d_hat = None if d_hat is None else np.atleast_2d(d_hat)
        self.neighbor_evals = neighbor_evals
        self.params = params or {}


def hyperplane_system(n=(1.0, 1.0), rhs_from_input=True):
    cs = ConstraintSet(n_y=2)
    e = sym.Const(n[0]) * sym.Output(0) + sym.Const(n[1]) * sym.Output(1)
    cs.equalities.append(e - (sym.Input(0) if rhs_from_input else sym.Const(3.0)))
    return assemble_kkt(cs)


def quadratic_pair_system():
    # y1 + y2 = s and y1*y2 = p, both from inputs
    cs = ConstraintSet(n_y=2)
    cs.equalities.append(sym.Output(0) + sym.Output(1) - sym.Input(0))
    cs.equalities.append(sym.Output(0) * sym.Output(1) - sym.Input(1))
    return assemble_kkt(cs)


CFG = ProjectionConfig()


class TestConfig:
    def test_zero_iterations_rejected(self):
        with pytest.raises(ValueError):
            ProjectionConfig(max_newton_iter=0)

    def test_step_length_range(self):
        with pytest.raises(ValueError):
            ProjectionConfig(newton_step_length=1.5)
        with pytest.raises(ValueError):
            ProjectionConfig(newton_step_length=0.0)


class TestNewton:
    def test_hyperplane_closed_form(self):
        system = hyperplane_system()
        fixed = Bindings(inputs=[np.array([3.0])], y_hat=[np.array([1.0]), np.array([1.0])])
        init = np.array([[1.0, 1.0, 0.0]])
        res = newton_solve(system, init, fixed, ProjectionConfig(residual_tol=1e-13))
        assert res.converged.all()
        assert res.iterations[0] <= 2
        np.testing.assert_allclose(res.y_proj[0], [1.5, 1.5], atol=1e-12)
        assert res.residual_norm[0] <= 1e-12

    def test_feasible_init_is_fixed_point(self):
        system = hyperplane_system()
        fixed = Bindings(inputs=[np.array([3.0])], y_hat=[np.array([1.2]), np.array([1.8])])
        init = np.array([[1.2, 1.8, 0.0]])  # already feasible and stationary
        res = newton_solve(system, init, fixed, CFG)
        assert res.converged.all()
        assert res.iterations[0] <= 1
        np.testing.assert_allclose(res.y_proj[0], [1.2, 1.8], atol=1e-9)

    def test_quadratic_pair_nearest_root(self):
        # offline oracle: with two equality constraints in two outputs the
        # feasible set is {(1,2), (2,1)}; the point nearest (1.2, 1.9) is
        # exactly (1, 2) with multipliers solving the 2x2 stationarity system
        # (lam_E = (-0.4, 0.3)).
        system = quadratic_pair_system()
        fixed = Bindings(
            inputs=[np.array([3.0]), np.array([2.0])],
            y_hat=[np.array([1.2]), np.array([1.9])],
        )
        init = np.array([[1.2, 1.9, 0.0, 0.0]])
        res = newton_solve(system, init, fixed, CFG)
        assert res.converged.all()
        np.testing.assert_allclose(res.y_proj[0], [1.0, 2.0], atol=1e-8)
        np.testing.assert_allclose(res.multipliers[0], [-0.4, 0.3], atol=1e-8)

    def test_idempotence(self):
        system = quadratic_pair_system()
        fixed = Bindings(
            inputs=[np.array([3.0]), np.array([2.0])],
            y_hat=[np.array([1.2]), np.array([1.9])],
        )
        res = newton_solve(system, np.array([[1.2, 1.9, 0.0, 0.0]]), fixed, CFG)
        z1 = np.concatenate([res.y_proj[0], res.multipliers[0]])
        res2 = newton_solve(system, z1[None], fixed, CFG)
        z2 = np.concatenate([res2.y_proj[0], res2.multipliers[0]])
        assert np.max(np.abs(z2 - z1)) <= 1e-9

    def test_determinism(self):
        system = quadratic_pair_system()
        fixed = Bindings(
            inputs=[np.array([3.3]), np.array([1.7])],
            y_hat=[np.array([1.4]), np.array([1.7])],
        )
        a = newton_solve(system, np.array([[1.4, 1.7, 0.0, 0.0]]), fixed, CFG)
        b = newton_solve(system, np.array([[1.4, 1.7, 0.0, 0.0]]), fixed, CFG)
        assert np.array_equal(a.y_proj, b.y_proj)
        assert np.array_equal(a.residual_norm, b.residual_norm)

    def test_nonconvergence_is_flagged_not_raised(self):
        system = quadratic_pair_system()
        # s^2 - 4p < 0: no real roots, Newton cannot converge
        fixed = Bindings(
            inputs=[np.array([1.0]), np.array([5.0])],
            y_hat=[np.array([0.5]), np.array([0.5])],
        )
        res = newton_solve(
            system, np.array([[0.5, 0.5, 0.0, 0.0]]), fixed,
            ProjectionConfig(max_newton_iter=8),
        )
        assert not res.converged.any()

    def test_primal_rows_hold_at_convergence(self):
        cs = ConstraintSet(n_y=2)
        r = cs.registry
        cs.differential.append(
            r.first(0) - sym.Const(0.1) * sym.Output(0)
            + sym.Const(0.02) * sym.Output(0) * sym.Output(1)
        )
        cs.differential.append(
            r.first(1) + sym.Const(0.4) * sym.Output(1)
            - sym.Const(0.02) * sym.Output(0) * sym.Output(1)
        )
        coupling = TaylorCoupling(delta=0.1, order=1, n_axes=1)
        system = assemble_kkt(cs, coupling)
        B = 16
        rng = np.random.default_rng(0)
        y_hat = rng.uniform(5, 15, size=(B, 2))
        nb = y_hat + rng.uniform(-0.1, 0.1, size=(B, 2))
        bundle = Bundle(
            inputs=rng.uniform(0, 10, size=(B, 1)),
            y_hat=y_hat,
            lambda_hat=np.zeros((B, system.n_mult)),
            d_hat=rng.normal(size=(B, 2)),
            neighbor_evals=nb[:, None, :],
        )
        res = project_batch(bundle, system, CFG)
        assert res.converged.all()
        fixed = fixed_bindings(bundle)
        b = Bindings(
            inputs=fixed.inputs,
            outputs=list(res.y_proj.T),
            derivs=list(res.d_proj.T),
            neighbors=fixed.neighbors,
        )
        for e in cs.differential:
            np.testing.assert_array_less(
                np.abs(sym.evaluate(e, b)), CFG.residual_tol * 10
            )
        for p in range(2):
            np.testing.assert_array_less(
                np.abs(sym.evaluate(coupling.residual(p, r), b)),
                CFG.residual_tol * 10,
            )

    def test_inequality_complementarity(self):
        # g = y - 1 <= 0, projection of y_hat = 2 lands on the bound with
        # lam >= 0, s >= 0, lam*s = 0
        cs = ConstraintSet(n_y=1, inequalities=[sym.Output(0) - sym.Const(1.0)])
        system = assemble_kkt(cs)
        bundle = Bundle(
            inputs=np.zeros((2, 1)),
            y_hat=np.array([[2.0], [0.3]]),
            lambda_hat=np.zeros((2, system.n_mult)),
        )
        res = project_batch(bundle, system, ProjectionConfig(max_newton_iter=60))
        assert res.converged.all()
        np.testing.assert_allclose(res.y_proj[:, 0], [1.0, 0.3], atol=1e-7)
        lam, s = res.multipliers[:, 0], res.slacks[:, 0]
        assert (lam >= -1e-8).all() and (s >= -1e-8).all()
        assert (np.abs(lam * s) <= 1e-8).all()


class TestBatch:
    def test_feasible_batch_is_identity(self):
        system = hyperplane_system()
        B = 8
        rng = np.random.default_rng(2)
        y1 = rng.normal(size=B)
        s = rng.normal(size=B) + 3.0
        bundle = Bundle(
            inputs=s[:, None],
            y_hat=np.stack([y1, s - y1], axis=1),
            lambda_hat=np.zeros((B, 1)),
        )
        res = project_batch(bundle, system, CFG)
        assert res.converged.all()
        np.testing.assert_allclose(res.y_proj, bundle.y_hat, atol=1e-9)

    def test_order_preserved(self):
        system = hyperplane_system()
        s = np.array([2.0, 4.0, 6.0])
        bundle = Bundle(
            inputs=s[:, None],
            y_hat=np.zeros((3, 2)),
            lambda_hat=np.zeros((3, 1)),
        )
        res = project_batch(bundle, system, CFG)
        np.testing.assert_allclose(res.y_proj[:, 0], s / 2, atol=1e-10)


class TestDifferentiable:
    def _traced_hyperplane(self, n_vec, y_hat_vals, rhs=3.0):
        cs = ConstraintSet(n_y=2)
        e = sym.Const(n_vec[0]) * sym.Output(0) + sym.Const(n_vec[1]) * sym.Output(1)
        cs.equalities.append(e - sym.Const(rhs))
        system = assemble_kkt(cs)
        t = Tape()
        y_hat = [t.input(v) for v in y_hat_vals]
        fixed = Bindings(y_hat=y_hat)
        init = y_hat + [t.const(0.0)]
        proj = project_differentiable(t, system, init, fixed, CFG)
        t.freeze()
        return t, y_hat, proj

    def test_unconstrained_jacobian_is_identity(self):
        cs = ConstraintSet(n_y=2)
        system = assemble_kkt(cs)
        t = Tape()
        y_hat = [t.input(0.7), t.input(-0.3)]
        proj = project_differentiable(
            t, system, list(y_hat), Bindings(y_hat=y_hat), CFG
        )
        t.freeze()
        _, grads, _, _ = t.run(
            seeds=[{proj.y[0]: 1.0}, {proj.y[1]: 1.0}], grads_for=y_hat
        )
        J = np.array([[grads[i][r.idx][0] for r in y_hat] for i in range(2)])
        np.testing.assert_allclose(J, np.eye(2), atol=1e-9)

    def test_hyperplane_jacobian_analytic(self):
        n_vec = (2.0, 1.0)
        t, y_hat, proj = self._traced_hyperplane(n_vec, [0.4, 0.9])
        _, grads, _, _ = t.run(
            seeds=[{proj.y[0]: 1.0}, {proj.y[1]: 1.0}], grads_for=y_hat
        )
        J = np.array([[grads[i][r.idx][0] for r in y_hat] for i in range(2)])
        n = np.array(n_vec)
        expected = np.eye(2) - np.outer(n, n) / (n @ n)
        np.testing.assert_allclose(J, expected, atol=1e-6)

    def test_quadratic_pair_jacobian_matches_fd(self):
        # A damped, partially converged unroll keeps the warm-start
        # sensitivity away from zero so the finite-difference oracle is
        # informative (a fully converged solve has d y_proj / d y_hat ~ 0
        # because the feasible points are isolated).
        system = quadratic_pair_system()
        cfg = ProjectionConfig(newton_step_length=0.5, max_newton_iter=3)

        def projected(y_hat_vals):
            t = Tape()
            y_hat = [t.input(v) for v in y_hat_vals]
            fixed = Bindings(
                inputs=[t.const(3.0), t.const(2.0)], y_hat=y_hat
            )
            init = y_hat + [t.const(0.0), t.const(0.0)]
            proj = project_differentiable(t, system, init, fixed, cfg)
            t.freeze()
            return t, y_hat, proj

        base = [1.2, 1.9]
        t, y_hat, proj = projected(base)
        _, grads, _, _ = t.run(
            seeds=[{proj.y[0]: 1.0}, {proj.y[1]: 1.0}], grads_for=y_hat
        )
        J = np.array([[grads[i][r.idx][0] for r in y_hat] for i in range(2)])
        assert np.abs(J).max() > 1e-3  # the comparison must not be vacuous
        h = 1e-6
        for j in range(2):
            up = list(base)
            dn = list(base)
            up[j] += h
            dn[j] -= h
            tu, _, pu = projected(up)
            vu, _, _, _ = tu.run(watch=pu.y)
            td, _, pd = projected(dn)
            vd, _, _, _ = td.run(watch=pd.y)
            for i in range(2):
                fd = (vu[pu.y[i].idx][0] - vd[pd.y[i].idx][0]) / (2 * h)
                denom = max(abs(fd), abs(J[i, j]), 1e-8)
                assert abs(J[i, j] - fd) / denom <= 1e-4 or abs(J[i, j] - fd) <= 1e-7

    def test_matches_inference_solver(self):
        system = quadratic_pair_system()
        t = Tape()
        y_hat = [t.input(1.2), t.input(1.9)]
        fixed = Bindings(inputs=[t.const(3.0), t.const(2.0)], y_hat=y_hat)
        proj = project_differentiable(
            t, system, y_hat + [t.const(0.0), t.const(0.0)], fixed, CFG
        )
        t.freeze()
        vals, _, _, _ = t.run(watch=proj.y + proj.residual)
        fixed_np = Bindings(
            inputs=[np.array([3.0]), np.array([2.0])],
            y_hat=[np.array([1.2]), np.array([1.9])],
        )
        res = newton_solve(system, np.array([[1.2, 1.9, 0.0, 0.0]]), fixed_np, CFG)
        np.testing.assert_allclose(
            [vals[r.idx][0] for r in proj.y], res.y_proj[0], atol=1e-12
        )
        assert max(abs(vals[r.idx][0]) for r in proj.residual) <= CFG.residual_tol


class TestInputJacobian:
    def test_hyperplane_input_sensitivity(self):
        # y_proj = y_hat + n (b - n.y_hat)/|n|^2 with b = x: d y_proj / dx = n/|n|^2
        system = hyperplane_system()
        fixed = Bindings(inputs=[np.array([3.0])], y_hat=[np.array([1.0]), np.array([1.0])])
        res = newton_solve(system, np.array([[1.0, 1.0, 0.0]]), fixed, CFG)
        z = np.concatenate([res.y_proj, res.multipliers], axis=1)
        dyhat = np.zeros((1, 2, 1))  # y_hat fixed, only the rhs moves
        J = solution_input_jacobian(system, z, fixed, dyhat, None, CFG)
        np.testing.assert_allclose(J[0, :, 0], [0.5, 0.5], atol=1e-8)
