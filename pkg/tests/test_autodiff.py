"""Tape and dual-number checks against finite-difference oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daehn.autodiff import (
    Dual,
    Dual2,
    DomainError,
    Tape,
    cos,
    exp,
    forward_first,
    forward_second,
    log,
    reverse_grad,
    sin,
    softplus,
    sqrt,
    tanh,
    trace,
)
from daehn.autodiff import kernel


def central_diff(f, xs, i, h=1e-5):
    up = list(xs)
    dn = list(xs)
    up[i] += h
    dn[i] -= h
    return (f(up) - f(dn)) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-30)


def grad_close(a, b, rel=1e-5, abs_near_zero=1e-8):
    return abs(a - b) <= abs_near_zero or rel_err(a, b) <= rel


class TestTrace:
    def test_identity(self):
        vals, _ = trace(lambda xs: [xs[0]], [7.0])
        assert vals == [7.0]

    def test_product(self):
        vals, _ = trace(lambda xs: [xs[0] * xs[1]], [3.0, 4.0])
        assert vals == [12.0]

    def test_tanh_zero(self):
        vals, _ = trace(lambda xs: [tanh(xs[0])], [0.0])
        assert vals == [0.0]

    def test_domain_error_sqrt(self):
        with pytest.raises(DomainError):
            trace(lambda xs: [sqrt(xs[0])], [-1.0])

    def test_domain_error_log(self):
        with pytest.raises(DomainError):
            trace(lambda xs: [log(xs[0])], [0.0])


class TestReverseGrad:
    def test_square(self):
        f = lambda xs: xs[0] ** 2
        _, tape = trace(lambda xs: [f(xs)], [3.0])
        (g,) = reverse_grad(tape)
        oracle = central_diff(lambda xs: f([xs[0]]), [3.0], 0)
        assert rel_err(g, oracle) <= 1e-5
        assert g == pytest.approx(6.0)

    def test_constant_has_zero_gradient(self):
        _, tape = trace(lambda xs: [xs[0] * 0.0 + 5.0], [2.0])
        assert reverse_grad(tape) == [0.0]

    def test_product_gradient(self):
        _, tape = trace(lambda xs: [xs[0] * xs[1]], [3.0, 4.0])
        assert reverse_grad(tape) == [4.0, 3.0]

    def test_unreached_input_gets_zero(self):
        _, tape = trace(lambda xs: [xs[0] + 1.0], [1.0, 9.0])
        assert reverse_grad(tape) == [1.0, 0.0]

    @given(
        st.lists(st.floats(-2.0, 2.0), min_size=2, max_size=2),
    )
    @settings(max_examples=40, deadline=None)
    def test_agrees_with_central_differences(self, xs):
        def f(zs):
            return sin(zs[0]) * zs[1] + exp(0.3 * zs[0]) + zs[1] ** 3 + tanh(
                zs[0] * zs[1]
            )

        _, tape = trace(lambda z: [f(z)], xs)
        grads = reverse_grad(tape)
        for i in range(2):
            oracle = central_diff(lambda z: f(z), xs, i)
            assert grad_close(grads[i], oracle)


class TestForwardModes:
    def test_linear_first(self):
        assert forward_first(lambda xs: [2.0 * xs[0]], [0.3], 0) == [2.0]

    def test_identity_first(self):
        assert forward_first(lambda xs: [xs[0]], [0.3], 0) == [1.0]

    def test_linear_second_is_zero(self):
        out = forward_second(lambda xs: [3.0 * xs[0] + 2.0 * xs[1]], [0.1, 0.2], 0)
        assert out == [0.0]

    def test_tanh_second_at_zero(self):
        assert forward_second(lambda xs: [tanh(xs[0])], [0.0], 0) == [0.0]

    def test_cube_second(self):
        assert forward_second(lambda xs: [xs[0] ** 3], [2.0], 0) == [12.0]

    def test_mlp_first_matches_fd(self):
        rng = np.random.default_rng(0)
        Ws = [rng.normal(size=(32, 4)) * 0.4] + [
            rng.normal(size=(32, 32)) * 0.2 for _ in range(3)
        ]
        Wo = rng.normal(size=(1, 32)) * 0.3

        def net(xs):
            h = xs
            for W in Ws:
                h = [tanh(sum(W[k][j] * h[j] for j in range(len(h)))) for k in range(32)]
            return [sum(Wo[0][j] * h[j] for j in range(32))]

        x = [0.3, -0.2, 0.5, 0.1]
        for axis in range(4):
            d1 = forward_first(net, x, axis)[0]
            oracle = central_diff(lambda z: net(z)[0], x, axis)
            assert rel_err(d1, oracle) <= 1e-6

    def test_forward_first_matches_reverse(self):
        def f(xs):
            return [exp(xs[0]) * sin(xs[1]) + xs[0] / (xs[1] + 2.0)]

        x = [0.4, 0.9]
        _, tape = trace(f, x)
        grads = reverse_grad(tape)
        for axis in range(2):
            d1 = forward_first(f, x, axis)[0]
            assert rel_err(d1, grads[axis]) <= 1e-10

    def test_second_order_chain_rule(self):
        # f(g(x)) with g = x^2, f = sin: d2 = -sin(x^2) (2x)^2 + cos(x^2) * 2
        x0 = 0.7
        d2 = forward_second(lambda xs: [sin(xs[0] ** 2)], [x0], 0)[0]
        expect = -math.sin(x0**2) * (2 * x0) ** 2 + math.cos(x0**2) * 2
        assert rel_err(d2, expect) <= 1e-12


class TestNestOnTape:
    def test_bilinear(self):
        # y = theta * x: d/dtheta (dy/dx) = 1
        t = Tape()
        theta = t.input(0.8)
        d1 = forward_first(lambda xs: [theta * xs[0]], [t.input(0.5)], 0)[0]
        t.freeze()
        _, grads, _, _ = t.run(seeds={d1: 1.0}, grads_for=[theta])
        assert grads[theta.idx][0] == pytest.approx(1.0)

    def test_quadratic(self):
        # y = theta x^2: d/dtheta (d2y/dx2) = 2
        t = Tape()
        theta = t.input(1.7)
        d2 = forward_second(lambda xs: [theta * xs[0] ** 2], [t.input(0.3)], 0)[0]
        t.freeze()
        _, grads, _, _ = t.run(seeds={d2: 1.0}, grads_for=[theta])
        assert grads[theta.idx][0] == pytest.approx(2.0)

    def test_mlp_parameter_gradient_of_input_derivative(self):
        rng = np.random.default_rng(3)
        shapes = [(8, 2)] + [(8, 8)] * 2 + [(1, 8)]
        flats = [rng.normal(size=s) * 0.5 for s in shapes]

        def build(tape):
            refs = [
                [[tape.input(w) for w in row] for row in W] for W in flats
            ]
            return refs

        def net(refs, xs):
            h = xs
            for li, W in enumerate(refs):
                nh = [
                    sum(W[k][j] * h[j] for j in range(len(h)))
                    for k in range(len(W))
                ]
                h = [tanh(z) for z in nh] if li < len(refs) - 1 else nh
            return h

        x0 = [0.3, -0.6]
        t = Tape()
        refs = build(t)
        d1 = forward_first(lambda xs: net(refs, xs), [t.input(v) for v in x0], 0)[0]
        t.freeze()
        _, grads, _, _ = t.run(seeds={d1: 1.0}, grads_for=[refs[1][2][3], refs[0][4][1]])

        def d1_of_weights(delta, li, ki, ji):
            W = [w.copy() for w in flats]
            W[li][ki][ji] += delta

            def forward(xs):
                h = xs
                for i, Wl in enumerate(W):
                    nh = [sum(Wl[k][j] * h[j] for j in range(len(h))) for k in range(len(Wl))]
                    h = [tanh(z) for z in nh] if i < len(W) - 1 else nh
                return h

            return forward_first(forward, x0, 0)[0]

        for ref, (li, ki, ji) in [(refs[1][2][3], (1, 2, 3)), (refs[0][4][1], (0, 4, 1))]:
            h = 1e-5
            oracle = (d1_of_weights(h, li, ki, ji) - d1_of_weights(-h, li, ki, ji)) / (2 * h)
            assert rel_err(grads[ref.idx][0], oracle) <= 1e-4


class TestDeterminism:
    def test_bitwise_replay(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=64)

        def f(xs):
            return [tanh(xs[0]) * exp(0.1 * xs[0]) + xs[0] ** 3 / (2.0 + cos(xs[0]))]

        v1, _ = trace(f, [x])
        v2, _ = trace(f, [x])
        assert np.array_equal(v1[0], v2[0])

    def test_replay_after_set_input(self):
        t = Tape()
        x = t.input(1.0)
        y = exp(x) * x
        t.freeze()
        a = t.value(y).copy()
        t.set_input(x, 2.0)
        b = t.value(y).copy()
        t.set_input(x, 1.0)
        c = t.value(y).copy()
        assert np.array_equal(a, c)
        assert not np.array_equal(a, b)


class TestKernelEquivalence:
    """The compiled kernel and the numpy fallback must agree."""

    def _random_tape(self, seed, batch=17):
        rng = np.random.default_rng(seed)
        t = Tape(batch=batch)
        pool = [t.input(rng.normal(size=batch)) for _ in range(4)]
        pool.append(t.input(float(rng.normal())))
        for _ in range(60):
            a = pool[rng.integers(len(pool))]
            b = pool[rng.integers(len(pool))]
            k = rng.integers(8)
            if k == 0:
                pool.append(a + b)
            elif k == 1:
                pool.append(a - b)
            elif k == 2:
                pool.append(a * b)
            elif k == 3:
                pool.append(tanh(a))
            elif k == 4:
                pool.append(sin(a) * cos(b))
            elif k == 5:
                pool.append(exp(tanh(a) * 0.5))
            elif k == 6:
                pool.append(softplus(a))
            else:
                pool.append(a / (softplus(b) + 1.0))
        rows = [[pool[rng.integers(len(pool))] for _ in range(3)] for _ in range(3)]
        diag = t.const(4.0)
        for i in range(3):
            rows[i][i] = rows[i][i] + diag
        sol = t.solve(rows, pool[-3:], mu=1e-10)
        out = sol[0] + sol[1] * sol[2] + pool[-1]
        t.freeze()
        leaves = [p for p in pool[:5]]
        return t, out, leaves

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_forward_and_reverse_match(self, seed):
        if len(kernel.available()) < 2:
            pytest.skip("compiled kernel unavailable")
        results = {}
        for name in kernel.available():
            kernel.use(name)
            t, out, leaves = self._random_tape(seed)
            vals, grads, _, _ = t.run(
                watch=[out], seeds={out: 1.0}, grads_for=leaves
            )
            results[name] = (
                vals[out.idx].copy(),
                [grads[l.idx].copy() for l in leaves],
            )
        kernel.use("compiled" if "compiled" in kernel.available() else "python")
        a, b = results["python"], results["compiled"]
        np.testing.assert_allclose(a[0], b[0], rtol=1e-12, atol=1e-12)
        for ga, gb in zip(a[1], b[1]):
            np.testing.assert_allclose(ga, gb, rtol=1e-9, atol=1e-12)


class TestSolveNodeAgainstUnrolledLU:
    """The solve block's value and gradient must match an elementwise-traced
    LU solve built from ordinary tape arithmetic."""

    def _traced_lu(self, t, rows, rhs):
        n = len(rhs)
        M = [[rows[i][j] for j in range(n)] for i in range(n)]
        v = list(rhs)
        for k in range(n):
            piv = M[k][k]
            for i in range(k + 1, n):
                f = M[i][k] / piv
                for j in range(k + 1, n):
                    M[i][j] = M[i][j] - f * M[k][j]
                v[i] = v[i] - f * v[k]
        x = [None] * n
        for k in range(n - 1, -1, -1):
            acc = v[k]
            for j in range(k + 1, n):
                acc = acc - M[k][j] * x[j]
            x[k] = acc / M[k][k]
        return x

    def test_values_and_grads_match(self):
        rng = np.random.default_rng(5)
        A = rng.normal(size=(4, 4)) + 4.0 * np.eye(4)
        b = rng.normal(size=4)

        def build(use_block):
            t = Tape()
            arefs = [[t.input(A[i, j]) for j in range(4)] for i in range(4)]
            brefs = [t.input(b[i]) for i in range(4)]
            if use_block:
                x = t.solve(arefs, brefs, mu=0.0)
            else:
                x = self._traced_lu(t, arefs, brefs)
            t.freeze()
            flat = [r for row in arefs for r in row] + brefs
            vals, grads, _, _ = t.run(
                watch=x, seeds={x[2]: 1.0}, grads_for=flat
            )
            return (
                np.array([vals[r.idx][0] for r in x]),
                np.array([grads[r.idx][0] for r in flat]),
            )

        xv_block, g_block = build(True)
        xv_lu, g_lu = build(False)
        np.testing.assert_allclose(xv_block, np.linalg.solve(A, b), rtol=1e-12)
        np.testing.assert_allclose(xv_block, xv_lu, rtol=1e-10)
        np.testing.assert_allclose(g_block, g_lu, rtol=1e-8, atol=1e-12)


class TestTapeStructure:
    def test_topological_order(self):
        # every node's operands have smaller indices
        _, tape = trace(
            lambda xs: [tanh(xs[0] * xs[1]) + exp(xs[0]) / (xs[1] ** 2 + 1.5)],
            [0.4, 0.8],
        )
        for i in range(len(tape.op)):
            assert tape.arg_a[i] < i
            assert tape.arg_b[i] < i

    def test_solve_block_operands_precede_block(self):
        t = Tape()
        a = t.inputs([3.0, 1.0, 1.0, 3.0])
        b = t.inputs([1.0, 2.0])
        x = t.solve([[a[0], a[1]], [a[2], a[3]]], b)
        t.freeze()
        first = x[0].idx
        assert all(int(i) < first for i in t.sb_aidx)
        assert all(int(i) < first for i in t.sb_bidx)
