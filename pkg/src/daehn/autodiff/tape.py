"""Reverse-mode tape over scalar programs with batched value rows.

A tape records one scalar program: an append-only, topologically ordered list
of nodes (operation kind, operand indices, local payload).  Each node carries
one value row of width ``batch`` so the same program is evaluated for a whole
batch of independent points in one sweep.  Leaves are either shared across the
batch (network weights, physical parameters) or per-column (coordinates,
targets).

Execution is deferred: build the program through :class:`Ref` arithmetic,
``freeze()`` it, then ``run()`` as often as needed with fresh leaf values.
Sweeps are delegated to a compiled kernel when available (see
``daehn.autodiff.kernel``) and to a numpy fallback otherwise.  Reverse sweeps
visit every node exactly once and accumulate adjoints; rows of shared leaves
are summed over the batch to produce parameter gradients.

Dense linear solves appear as first-class blocks: ``solve`` records the n*n
coefficient refs and right-hand side refs, the kernel performs one pivoted LU
per column (with a diagonal shift ``mu`` for rank-deficient systems), and the
reverse rule applies the exact solve adjoint.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import ops


class DomainError(ValueError):
    """A traced primitive was evaluated outside its domain."""


_ERR_MSG = {
    1: "division by zero",
    2: "log of a non-positive argument",
    3: "sqrt of a negative argument",
    4: "invalid power (negative base with fractional exponent, or 0**negative)",
}

# Memory cap for the cached value/adjoint buffers of one tape (bytes).
_BUFFER_BUDGET = int(os.environ.get("DAEHN_TAPE_BUDGET", 700 * 2**20))


def _as_float(x):
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    return None


class Ref:
    """Handle to one tape node; arithmetic on refs appends nodes."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    def __repr__(self):
        return f"Ref({self.idx}:{ops.NAMES[self.tape._op[self.idx]]})"

    def _lift(self, other):
        if isinstance(other, Ref):
            if other.tape is not self.tape:
                raise ValueError("refs belong to different tapes")
            return other
        v = _as_float(other)
        if v is None:
            return None
        return self.tape.const(v)

    def _cval(self):
        """Constant value when this ref is a const node, else None."""
        t = self.tape
        return t._aux[self.idx] if t._op[self.idx] == ops.CONST else None

    # Peephole folds (x+0, x*0, x*1, x-0, x/1, x**0, x**1) keep dual-number
    # passes over parameter refs from emitting dead arithmetic.
    def __add__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        if o._cval() == 0.0:
            return self
        if self._cval() == 0.0:
            return o
        return self.tape._emit(ops.ADD, self.idx, o.idx)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        if o._cval() == 0.0:
            return self
        return self.tape._emit(ops.SUB, self.idx, o.idx)

    def __rsub__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        if self._cval() == 0.0:
            return o
        return self.tape._emit(ops.SUB, o.idx, self.idx)

    def __mul__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        for u, v in ((self, o), (o, self)):
            c = u._cval()
            if c == 0.0:
                return u
            if c == 1.0:
                return v
        return self.tape._emit(ops.MUL, self.idx, o.idx)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        if o._cval() == 1.0 or self._cval() == 0.0:
            return self
        return self.tape._emit(ops.DIV, self.idx, o.idx)

    def __rtruediv__(self, other):
        o = self._lift(other)
        if o is None:
            return NotImplemented
        return o.__truediv__(self)

    def __neg__(self):
        return self.tape._emit(ops.NEG, self.idx)

    def __pow__(self, n):
        e = _as_float(n)
        if e is None:
            return NotImplemented
        if e == 1.0:
            return self
        if e == 0.0:
            return self.tape.const(1.0)
        return self.tape._emit(ops.POW, self.idx, aux=e)

    def exp(self):
        return self.tape._emit(ops.EXP, self.idx)

    def log(self):
        return self.tape._emit(ops.LOG, self.idx)

    def sin(self):
        return self.tape._emit(ops.SIN, self.idx)

    def cos(self):
        return self.tape._emit(ops.COS, self.idx)

    def sqrt(self):
        return self.tape._emit(ops.SQRT, self.idx)

    def tanh(self):
        return self.tape._emit(ops.TANH, self.idx)

    def softplus(self):
        return self.tape._emit(ops.SOFTPLUS, self.idx)


class SharedRef:
    """Handle to one slot of the tape's compact shared vector.

    Shared slots hold batch-invariant parameters (weights, biases, learnable
    physical constants).  They are read in place by the shared-operand ops,
    so they occupy no value rows; their adjoints accumulate into a per-slot
    gradient vector.  Arithmetic outside the fused fast paths materializes
    the slot as an ordinary row once (cached) and delegates.
    """

    __slots__ = ("tape", "slot")

    def __init__(self, tape, slot):
        self.tape = tape
        self.slot = slot

    def __repr__(self):
        return f"SharedRef({self.slot})"

    def node(self) -> "Ref":
        return self.tape._sload(self.slot)

    def __mul__(self, other):
        if isinstance(other, Ref):
            if other._cval() is not None:
                return self.node() * other
            return self.tape._emit(ops.MUL_S, other.idx, c=self.slot)
        return self.node() * other

    __rmul__ = __mul__

    def __add__(self, other):
        if isinstance(other, Ref) and other._cval() is None:
            return self.tape._emit(ops.ADD_S, other.idx, c=self.slot)
        return self.node() + other

    __radd__ = __add__

    def __sub__(self, other):
        return self.node() - other

    def __rsub__(self, other):
        return other - self.node()

    def __truediv__(self, other):
        return self.node() / other

    def __rtruediv__(self, other):
        return other / self.node()

    def __neg__(self):
        return -self.node()

    def __pow__(self, n):
        return self.node() ** n

    def exp(self):
        return self.node().exp()

    def log(self):
        return self.node().log()

    def sin(self):
        return self.node().sin()

    def cos(self):
        return self.node().cos()

    def sqrt(self):
        return self.node().sqrt()

    def tanh(self):
        return self.node().tanh()

    def softplus(self):
        return self.node().softplus()


class _SolveBlock:
    __slots__ = ("first", "n", "mu", "a_idx", "b_idx")

    def __init__(self, first, n, mu, a_idx, b_idx):
        self.first = first
        self.n = n
        self.mu = mu
        self.a_idx = a_idx  # (n*n,) row-major node indices
        self.b_idx = b_idx  # (n,) node indices


class Tape:
    """Append-only scalar program with batched evaluation and reverse sweep."""

    def __init__(self, batch: int = 1):
        if batch < 1:
            raise ValueError("batch must be >= 1")
        self.batch = int(batch)
        self._op: list[int] = []
        self._a: list[int] = []
        self._b: list[int] = []
        self._c: list[int] = []
        self._aux: list[float] = []
        self._const_cache: dict[float, Ref] = {}
        self._leaf_pos: dict[int, int] = {}  # node idx -> slot in leaf value table
        self._leaf_vals: list = []  # float (shared) or (batch,) array per slot
        self._shared_list: list[float] = []
        self._sload_cache: dict[int, Ref] = {}
        self._blocks: list[_SolveBlock] = []
        self._marks: list[tuple[str, int]] = [("start", 0)]
        self._frozen = False
        self._V = None
        self._G = None
        self._GS = None
        self._VER = None
        self._rev_counter = 0
        self._chunk = None

    # ------------------------------------------------------------------ build
    def __len__(self):
        return len(self._op)

    def _emit(self, op, a=-1, b=-1, aux=0.0, c=-1) -> Ref:
        if self._frozen:
            raise RuntimeError("tape is frozen")
        self._op.append(op)
        self._a.append(a)
        self._b.append(b)
        self._c.append(c)
        self._aux.append(aux)
        return Ref(self, len(self._op) - 1)

    def input(self, value=0.0) -> Ref:
        """New leaf node.  Scalar values are shared across the batch,
        (batch,)-arrays are per-column."""
        r = self._emit(ops.INPUT)
        self._leaf_pos[r.idx] = len(self._leaf_vals)
        self._leaf_vals.append(None)
        self.set_input(r, value)
        return r

    def inputs(self, values) -> list[Ref]:
        return [self.input(v) for v in values]

    def const(self, v) -> Ref:
        v = float(v)
        r = self._const_cache.get(v)
        if r is None:
            r = self._emit(ops.CONST, aux=v)
            self._const_cache[v] = r
        return r

    def set_input(self, ref: Ref, value):
        pos = self._leaf_pos.get(ref.idx)
        if pos is None:
            raise KeyError("ref is not a leaf")
        s = _as_float(value)
        if s is not None:
            if self._frozen and not isinstance(self._leaf_vals[pos], float):
                raise ValueError("leaf kind is fixed after freeze")
            self._leaf_vals[pos] = s
        else:
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != (self.batch,):
                raise ValueError(f"leaf array must have shape ({self.batch},)")
            if self._frozen:
                if isinstance(self._leaf_vals[pos], float):
                    raise ValueError("leaf kind is fixed after freeze")
                self._col_mat[self._col_pos_map[pos]] = arr
            self._leaf_vals[pos] = arr

    # ------------------------------------------------------------ shared slots
    def shared(self, value: float) -> SharedRef:
        """New shared slot (batch-invariant parameter)."""
        self._shared_list.append(float(value))
        return SharedRef(self, len(self._shared_list) - 1)

    def shared_block(self, values) -> list:
        return [self.shared(v) for v in np.asarray(values, dtype=np.float64).ravel()]

    @property
    def n_shared(self):
        return len(self._shared_list)

    def set_shared_vector(self, values):
        """Overwrite all shared slots at once (slot order = creation order)."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (self.n_shared,):
            raise ValueError(f"expected {self.n_shared} shared values")
        if self._frozen:
            self._shared_arr[:] = arr
        else:
            self._shared_list[:] = [float(v) for v in arr]

    def _sload(self, slot) -> Ref:
        r = self._sload_cache.get(slot)
        if r is None:
            r = self._emit(ops.SLOAD, c=slot)
            self._sload_cache[slot] = r
        return r

    def muladd(self, acc: Ref, w: SharedRef, x: Ref) -> Ref:
        """Fused acc + shared[w] * x (the matvec hot path)."""
        return self._emit(ops.MULADD_S, acc.idx, x.idx, c=w.slot)

    def solve(self, a_rows, rhs, mu=0.0) -> list[Ref]:
        """Append x = (A + mu*I)^-1 b for per-column dense A.

        ``a_rows`` is an n x n nested list of refs (row-major), ``rhs`` a list
        of n refs.  Returns the n solution refs.  The reverse rule is the
        exact adjoint of the regularized solve.
        """
        n = len(rhs)
        if n < 1 or n > 64:
            raise ValueError("solve supports systems of size 1..64")
        if len(a_rows) != n or any(len(row) != n for row in a_rows):
            raise ValueError("coefficient block must be n x n")
        a_idx = np.array([[r.idx for r in row] for row in a_rows], dtype=np.int32).ravel()
        b_idx = np.array([r.idx for r in rhs], dtype=np.int32)
        first = len(self._op)
        out = [self._emit(ops.SOLVE) for _ in range(n)]
        self._blocks.append(_SolveBlock(first, n, float(mu), a_idx, b_idx))
        return out

    def mark(self, name: str):
        """Start a new named program phase at the current node (segment
        timing); nodes recorded from here on belong to ``name``."""
        self._marks.append((name, len(self._op)))

    def label_start(self, name: str):
        """Rename the initial program phase."""
        self._marks[0] = (name, 0)

    # ------------------------------------------------------------------- run
    def freeze(self):
        if self._frozen:
            return
        self._frozen = True
        self.op = np.asarray(self._op, dtype=np.int32)
        self.arg_a = np.asarray(self._a, dtype=np.int32)
        self.arg_b = np.asarray(self._b, dtype=np.int32)
        self.arg_c = np.asarray(self._c, dtype=np.int32)
        self.aux = np.asarray(self._aux, dtype=np.float64)
        self._shared_arr = np.asarray(self._shared_list, dtype=np.float64)
        n = len(self.op)
        # leaf fill tables
        shared, cols = [], []
        for idx, pos in self._leaf_pos.items():
            if isinstance(self._leaf_vals[pos], float):
                shared.append((idx, pos))
            else:
                cols.append((idx, pos))
        # a leaf may switch between shared/array via set_input before freeze;
        # afterwards its kind is fixed.
        self._shared_rows = np.array([i for i, _ in shared], dtype=np.int32)
        self._shared_pos = [p for _, p in shared]
        self._col_rows = np.array([i for i, _ in cols], dtype=np.int32)
        self._col_mat = np.empty((len(cols), self.batch), dtype=np.float64)
        self._col_pos = [p for _, p in cols]
        self._col_pos_map = {p: row for row, p in enumerate(self._col_pos)}
        for row, p in enumerate(self._col_pos):
            self._col_mat[row] = self._leaf_vals[p]
        # block tables for the kernels
        self._blocks.sort(key=lambda blk: blk.first)
        self.sb_first = np.array([blk.first for blk in self._blocks], dtype=np.int32)
        self.sb_n = np.array([blk.n for blk in self._blocks], dtype=np.int32)
        self.sb_mu = np.array([blk.mu for blk in self._blocks], dtype=np.float64)
        self.sb_aoff = np.zeros(len(self._blocks) + 1, dtype=np.int32)
        self.sb_boff = np.zeros(len(self._blocks) + 1, dtype=np.int32)
        for k, blk in enumerate(self._blocks):
            self.sb_aoff[k + 1] = self.sb_aoff[k] + blk.n * blk.n
            self.sb_boff[k + 1] = self.sb_boff[k] + blk.n
        self.sb_aidx = (
            np.concatenate([blk.a_idx for blk in self._blocks])
            if self._blocks
            else np.zeros(0, dtype=np.int32)
        )
        self.sb_bidx = (
            np.concatenate([blk.b_idx for blk in self._blocks])
            if self._blocks
            else np.zeros(0, dtype=np.int32)
        )
        chunk = max(1, min(self.batch, _BUFFER_BUDGET // (16 * max(n, 1))))
        env = os.environ.get("DAEHN_CHUNK")
        if env:
            chunk = max(1, min(self.batch, int(env)))
        self._chunk = chunk
        self._segments = self._segment_spans()

    def _segment_spans(self):
        spans = []
        bounds = [idx for _, idx in self._marks] + [len(self.op)]
        names = [name for name, _ in self._marks]
        for name, lo, hi in zip(names, bounds[:-1], bounds[1:]):
            if hi > lo:
                spans.append((name, lo, hi))
        for blk in self._blocks:
            for _, lo, hi in spans:
                if lo <= blk.first < hi and blk.first + blk.n > hi:
                    raise ValueError("solve block straddles a mark")
        return spans

    def _buffers(self, with_grad):
        n = len(self.op)
        if self._V is None or self._V.shape != (n, self._chunk):
            self._V = np.empty((n, self._chunk), dtype=np.float64)
        if with_grad and (self._G is None or self._G.shape != (n, self._chunk)):
            self._G = np.empty((n, self._chunk), dtype=np.float64)
        if with_grad and (
            self._GS is None or self._GS.shape[1] != max(self.n_shared, 1)
        ):
            self._GS = np.zeros((64, max(self.n_shared, 1)), dtype=np.float64)
        if with_grad and (self._VER is None or self._VER.shape[1] != max(n, 1)):
            self._VER = np.zeros((64, max(n, 1)), dtype=np.int32)
            self._rev_counter = 0
        return self._V, (self._G if with_grad else None)

    def _next_rev(self):
        self._rev_counter += 1
        if self._rev_counter >= 2**31 - 1:
            self._VER[:] = 0
            self._rev_counter = 1
        return self._rev_counter

    def run(
        self,
        watch=(),
        seeds=None,
        grads_for=(),
        grad_sum_rows=None,
        shared_grads=False,
        timers=None,
    ):
        """One pass over all columns in chunks.

        watch          refs whose full-width values are returned
        seeds          adjoint seeds: dict {ref: scalar or (batch,) array}, a
                       list of such dicts (several reverse sweeps over one
                       forward), or a callable (chunk_values, slice) -> dict
        grads_for      refs whose full-width adjoint rows are returned
        grad_sum_rows  int32 node-index array; the batch-summed adjoints of
                       those rows are returned as one float vector
        shared_grads   also return the per-slot adjoint vector of the shared
                       parameter slots
        timers         dict accumulating per-segment forward seconds plus
                       a "reverse" entry

        Returns (values, grads, grad_sums, loss_like) where ``grads`` mirrors
        the structure of ``seeds``, ``grad_sums`` is the shared-slot vector
        when ``shared_grads`` is set (else the ``grad_sum_rows`` vector) and
        ``loss_like`` is whatever the seed callable returned as its second
        element (summed over chunks).
        """
        from . import kernel

        if not self._frozen:
            self.freeze()
        seed_list = seeds if isinstance(seeds, list) else None
        want_grad = seeds is not None
        V, G = self._buffers(want_grad)
        shared_vals = np.array(
            [self._leaf_vals[p] for p in self._shared_pos], dtype=np.float64
        )

        values = {r.idx: np.empty(self.batch) for r in watch}
        if seed_list is not None:
            grads = [
                {r.idx: np.empty(self.batch) for r in grads_for} for _ in seed_list
            ]
        else:
            grads = {r.idx: np.empty(self.batch) for r in grads_for}
        if seed_list is not None and (grad_sum_rows is not None or shared_grads):
            raise ValueError("summed gradients support a single seed set")
        grad_sums = None
        if shared_grads:
            grad_sums = np.zeros(self.n_shared)
        elif grad_sum_rows is not None:
            grad_sums = np.zeros(len(grad_sum_rows))
        extra_total = 0.0

        for c0 in range(0, self.batch, self._chunk):
            c1 = min(c0 + self._chunk, self.batch)
            w = c1 - c0
            if len(self._shared_rows):
                V[self._shared_rows, :w] = shared_vals[:, None]
            if len(self._col_rows):
                V[self._col_rows, :w] = self._col_mat[:, c0:c1]
            self._forward(kernel, V, w, timers)
            chunk_vals = {r.idx: V[r.idx, :w] for r in watch}
            for idx, arr in chunk_vals.items():
                values[idx][c0:c1] = arr
            if seeds is None:
                continue
            for si, seed in enumerate(seed_list if seed_list is not None else [seeds]):
                if callable(seed):
                    seed, extra = seed(chunk_vals, slice(c0, c1))
                    extra_total += extra
                seed_rows = np.empty(len(seed), dtype=np.int32)
                seed_vals = np.empty((len(seed), w), dtype=np.float64)
                for k, (ref, s) in enumerate(seed.items()):
                    seed_rows[k] = ref.idx
                    sv = _as_float(s)
                    if sv is not None:
                        seed_vals[k] = sv
                    else:
                        arr = np.asarray(s, dtype=np.float64)
                        seed_vals[k] = arr if arr.shape == (w,) else arr[c0:c1]
                self._GS[:] = 0.0
                cur = self._next_rev()
                self._reverse(kernel, V, G, w, cur, seed_rows, seed_vals, timers)
                sink = grads[si] if seed_list is not None else grads
                for r in grads_for:
                    if (self._VER[:, r.idx] == cur).any():
                        sink[r.idx][c0:c1] = G[r.idx, :w]
                    else:
                        sink[r.idx][c0:c1] = 0.0
                if shared_grads:
                    grad_sums += self._GS.sum(axis=0)
                elif grad_sum_rows is not None:
                    mask = (self._VER[:, grad_sum_rows] == cur).any(axis=0)
                    grad_sums += np.where(
                        mask, G[grad_sum_rows, :w].sum(axis=1), 0.0
                    )

        out_vals = {r.idx: values[r.idx] for r in watch}
        return out_vals, grads, grad_sums, extra_total

    def _forward(self, kernel, V, w, timers):
        import time

        for name, lo, hi in self._segments:
            t0 = time.perf_counter() if timers is not None else 0.0
            err_node, err_code = kernel.forward(
                self.op, self.arg_a, self.arg_b, self.arg_c, self.aux,
                self._shared_arr, V, w, lo, hi,
                self.sb_first, self.sb_n, self.sb_mu,
                self.sb_aoff, self.sb_boff, self.sb_aidx, self.sb_bidx,
            )
            if err_code:
                raise DomainError(
                    f"node {err_node} ({ops.NAMES[self.op[err_node]]}): "
                    f"{_ERR_MSG[err_code]}"
                )
            if timers is not None:
                timers[name] = timers.get(name, 0.0) + time.perf_counter() - t0

    def _reverse(self, kernel, V, G, w, cur, seed_rows, seed_vals, timers):
        import time

        t0 = time.perf_counter() if timers is not None else 0.0
        kernel.reverse(
            self.op, self.arg_a, self.arg_b, self.arg_c, self.aux,
            self._shared_arr, V, G, self._GS, self._VER, cur,
            seed_rows, seed_vals, w, 0, len(self.op),
            self.sb_first, self.sb_n, self.sb_mu,
            self.sb_aoff, self.sb_boff, self.sb_aidx, self.sb_bidx,
        )
        if timers is not None:
            timers["reverse"] = timers.get("reverse", 0.0) + time.perf_counter() - t0

    # ------------------------------------------------------------ convenience
    def value(self, ref: Ref) -> np.ndarray:
        vals, _, _, _ = self.run(watch=[ref])
        return vals[ref.idx]


def trace(program, inputs, batch=None):
    """Record ``program`` (a callable over a list of tape scalars) at ``inputs``.

    Returns (output values, tape).  Marked inputs are stored on the tape as
    ``tape.input_refs``, outputs as ``tape.output_refs``.
    """
    inputs = list(inputs)
    if batch is None:
        batch = 1
        for v in inputs:
            if not isinstance(v, (int, float)):
                batch = len(np.asarray(v))
                break
    tape = Tape(batch=batch)
    in_refs = [tape.input(v) for v in inputs]
    out = program(in_refs)
    out_refs = list(out) if isinstance(out, (list, tuple)) else [out]
    tape.input_refs = in_refs
    tape.output_refs = out_refs
    tape.freeze()
    vals, _, _, _ = tape.run(watch=out_refs)
    values = [vals[r.idx] for r in out_refs]
    if batch == 1:
        values = [float(v[0]) for v in values]
    return values, tape


def reverse_grad(tape: Tape, output=0):
    """Gradient of one traced output with respect to every traced input.

    Inputs the output does not reach get gradient 0.
    """
    out_ref = tape.output_refs[output] if isinstance(output, int) else output
    _, grads, _, _ = tape.run(seeds={out_ref: 1.0}, grads_for=tape.input_refs)
    g = [grads[r.idx] for r in tape.input_refs]
    if tape.batch == 1:
        g = [float(x[0]) for x in g]
    return g
