"""Numpy fallback sweep kernel.

Implements the same forward/reverse contract as the compiled kernel: one
value row per node, elementwise primitives over the chunk columns,
shared-slot operand variants for batch-invariant parameters, dense solve
blocks with a diagonal shift, exact solve adjoint in reverse.

The reverse sweep never zeroes the adjoint buffer: per-row version stamps
(``ver`` against the current sweep counter ``cur``) mark initialized rows, a
row's first write assigns, later writes accumulate, and nodes whose adjoint
row was never stamped are skipped outright.  Shared-slot adjoints accumulate
into row 0 of the ``GS`` scratch.
"""

import numpy as np

from . import ops


def _run_block(V, first, n, mu, aidx, bidx):
    w = V.shape[1]
    A = V[aidx].reshape(n, n, w).transpose(2, 0, 1).copy()
    A[:, np.arange(n), np.arange(n)] += mu
    b = V[bidx].T
    try:
        x = np.linalg.solve(A, b[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        x = np.empty_like(b)
        for j in range(w):
            try:
                x[j] = np.linalg.solve(A[j], b[j])
            except np.linalg.LinAlgError:
                x[j] = np.linalg.lstsq(A[j], b[j], rcond=None)[0]
    V[first : first + n] = x.T
    return A, x


def forward(op, a, b, c, aux, shared, V, width, start, end,
            sb_first, sb_n, sb_mu, sb_aoff, sb_boff, sb_aidx, sb_bidx):
    V = V[:, :width]
    blk = int(np.searchsorted(sb_first, start))
    i = start
    while i < end:
        if blk < len(sb_first) and sb_first[blk] == i:
            n = int(sb_n[blk])
            _run_block(
                V, i, n, sb_mu[blk],
                sb_aidx[sb_aoff[blk] : sb_aoff[blk] + n * n],
                sb_bidx[sb_boff[blk] : sb_boff[blk] + n],
            )
            i += n
            blk += 1
            continue
        o = op[i]
        ai, bi = a[i], b[i]
        if o == ops.INPUT:
            pass  # filled by the tape
        elif o == ops.CONST:
            V[i] = aux[i]
        elif o == ops.ADD:
            np.add(V[ai], V[bi], out=V[i])
        elif o == ops.SUB:
            np.subtract(V[ai], V[bi], out=V[i])
        elif o == ops.MUL:
            np.multiply(V[ai], V[bi], out=V[i])
        elif o == ops.DIV:
            if np.any(V[bi] == 0.0):
                return i, 1
            np.divide(V[ai], V[bi], out=V[i])
        elif o == ops.NEG:
            np.negative(V[ai], out=V[i])
        elif o == ops.POW:
            e = aux[i]
            if (e != int(e) and np.any(V[ai] < 0.0)) or (
                e < 0.0 and np.any(V[ai] == 0.0)
            ):
                return i, 4
            np.power(V[ai], e, out=V[i])
        elif o == ops.EXP:
            np.exp(V[ai], out=V[i])
        elif o == ops.LOG:
            if np.any(V[ai] <= 0.0):
                return i, 2
            np.log(V[ai], out=V[i])
        elif o == ops.SIN:
            np.sin(V[ai], out=V[i])
        elif o == ops.COS:
            np.cos(V[ai], out=V[i])
        elif o == ops.SQRT:
            if np.any(V[ai] < 0.0):
                return i, 3
            np.sqrt(V[ai], out=V[i])
        elif o == ops.TANH:
            np.tanh(V[ai], out=V[i])
        elif o == ops.SOFTPLUS:
            v = V[ai]
            V[i] = np.where(v > 0.0, v, 0.0) + np.log1p(np.exp(-np.abs(v)))
        elif o == ops.SLOAD:
            V[i] = shared[c[i]]
        elif o == ops.ADD_S:
            np.add(V[ai], shared[c[i]], out=V[i])
        elif o == ops.MUL_S:
            np.multiply(V[ai], shared[c[i]], out=V[i])
        elif o == ops.MULADD_S:
            np.multiply(V[bi], shared[c[i]], out=V[i])
            V[i] += V[ai]
        else:  # pragma: no cover
            raise AssertionError(f"unknown op {o}")
        i += 1
    return -1, 0


def _reverse_block(V, G, vs, cur, first, n, mu, aidx, bidx, acc):
    A, x = _run_block(V, first, n, mu, aidx, bidx)
    rows = range(first, first + n)
    if all(vs[r] != cur for r in rows):
        return
    gout = np.stack(
        [G[r] if vs[r] == cur else np.zeros(V.shape[1]) for r in rows], axis=1
    )
    w = np.linalg.solve(A.transpose(0, 2, 1), gout[:, :, None])[:, :, 0]
    for r in range(n):
        acc(bidx[r], w[:, r])
        for cc in range(n):
            acc(aidx[r * n + cc], -w[:, r] * x[:, cc])


def reverse(op, a, b, c, aux, shared, V, G, GS, ver, cur,
            seed_rows, seed_vals, width, start, end,
            sb_first, sb_n, sb_mu, sb_aoff, sb_boff, sb_aidx, sb_bidx):
    V = V[:, :width]
    G = G[:, :width]
    gs = GS[0]
    vs = ver[0]

    def acc(row, val):
        if vs[row] == cur:
            G[row] += val
        else:
            G[row] = val
            vs[row] = cur

    for k in range(len(seed_rows)):
        acc(seed_rows[k], seed_vals[k])

    blk = len(sb_first) - 1
    while blk >= 0 and sb_first[blk] >= end:
        blk -= 1
    i = end - 1
    while i >= start:
        if blk >= 0 and sb_first[blk] + sb_n[blk] - 1 == i:
            n = int(sb_n[blk])
            _reverse_block(
                V, G, vs, cur, int(sb_first[blk]), n, sb_mu[blk],
                sb_aidx[sb_aoff[blk] : sb_aoff[blk] + n * n],
                sb_bidx[sb_boff[blk] : sb_boff[blk] + n],
                acc,
            )
            i = int(sb_first[blk]) - 1
            blk -= 1
            continue
        if vs[i] != cur:
            i -= 1
            continue
        o = op[i]
        g = G[i]
        ai, bi = a[i], b[i]
        if o == ops.ADD:
            acc(ai, g)
            acc(bi, g)
        elif o == ops.SUB:
            acc(ai, g)
            acc(bi, -g)
        elif o == ops.MUL:
            acc(ai, g * V[bi])
            acc(bi, g * V[ai])
        elif o == ops.DIV:
            acc(ai, g / V[bi])
            acc(bi, -g * V[i] / V[bi])
        elif o == ops.NEG:
            acc(ai, -g)
        elif o == ops.POW:
            e = aux[i]
            if e != 0.0:
                with np.errstate(divide="ignore", invalid="ignore"):
                    acc(ai, g * e * np.power(V[ai], e - 1.0))
        elif o == ops.EXP:
            acc(ai, g * V[i])
        elif o == ops.LOG:
            acc(ai, g / V[ai])
        elif o == ops.SIN:
            acc(ai, g * np.cos(V[ai]))
        elif o == ops.COS:
            acc(ai, -g * np.sin(V[ai]))
        elif o == ops.SQRT:
            with np.errstate(divide="ignore"):
                acc(ai, g / (2.0 * V[i]))
        elif o == ops.TANH:
            acc(ai, g * (1.0 - V[i] * V[i]))
        elif o == ops.SOFTPLUS:
            acc(ai, g / (1.0 + np.exp(-V[ai])))
        elif o == ops.SLOAD:
            gs[c[i]] += g.sum()
        elif o == ops.ADD_S:
            acc(ai, g)
            gs[c[i]] += g.sum()
        elif o == ops.MUL_S:
            acc(ai, g * shared[c[i]])
            gs[c[i]] += float(g @ V[ai])
        elif o == ops.MULADD_S:
            acc(ai, g)
            acc(bi, g * shared[c[i]])
            gs[c[i]] += float(g @ V[bi])
        i -= 1
