"""MLP backbone with an output head, a multiplier head and optional learnable
physical parameters.

The backbone is a tanh MLP (tanh keeps the input map C^2, which the
second-order derivative variables require).  Inputs are standardized to zero
mean / unit variance with training-split statistics; all derivative seeds and
neighbor offsets carry the matching chain-rule factors so every exported
quantity lives in physical units.

Two evaluation paths share the same parameters:
  * a payload-generic scalar path (floats, batched rows, tape refs, duals)
    used for tracing the training program and in tests;
  * a matmul path for batched inference (predictions, derivative bundles,
    neighbor evaluations) used by metric evaluation and artifact emission.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import duals
from .kkt import DerivRegistry

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int
    output_dim: int
    multiplier_dim: int
    hidden_dim: int
    model_depth: int  # number of hidden layers
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.hidden_dim) < 1:
            raise ValueError("dimensions must be positive")
        # model_depth == 0 (no hidden layer, i.e. a plain linear map) is a
        # test hook; training configs require at least one hidden layer.
        if self.model_depth < 0 or self.multiplier_dim < 0:
            raise ValueError("model_depth and multiplier_dim must be >= 0")
        if self.activation != "tanh":
            raise ValueError("only the tanh backbone is supported")

    @property
    def layer_shapes(self):
        dims = (
            [self.input_dim]
            + [self.hidden_dim] * self.model_depth
            + [self.output_dim + self.multiplier_dim]
        )
        return list(zip(dims[1:], dims[:-1]))

    @property
    def parameter_count(self):
        return sum(fo * fi + fo for fo, fi in self.layer_shapes)


@dataclass
class NetworkParams:
    config: BackboneConfig
    weights: list  # (fan_out, fan_in) arrays
    biases: list  # (fan_out,) arrays
    phys: dict = field(default_factory=dict)  # learnable physical parameters
    input_mu: np.ndarray = None
    input_sigma: np.ndarray = None
    # whether the projected-loss phase had engaged when this state was saved
    activated: bool = True

    def __post_init__(self):
        if self.input_mu is None:
            self.input_mu = np.zeros(self.config.input_dim)
        if self.input_sigma is None:
            self.input_sigma = np.ones(self.config.input_dim)

    def copy(self):
        return NetworkParams(
            config=self.config,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            phys=dict(self.phys),
            input_mu=self.input_mu.copy(),
            input_sigma=self.input_sigma.copy(),
            activated=self.activated,
        )

    def set_input_stats(self, mu, sigma):
        self.input_mu = np.asarray(mu, dtype=np.float64)
        self.input_sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(self.input_sigma <= 0):
            raise ValueError("input sigma must be positive")


def init_params(config: BackboneConfig, phys_init=None, zero=False) -> NetworkParams:
    """Xavier-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases,
    deterministic per seed.  ``zero=True`` is a test hook producing an
    all-zero network."""
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for fan_out, fan_in in config.layer_shapes:
        if zero:
            weights.append(np.zeros((fan_out, fan_in)))
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(
        config=config,
        weights=weights,
        biases=biases,
        phys=dict(phys_init or {}),
    )


@dataclass
class BackboneBundle:
    """Per-point backbone quantities feeding one projection solve.

    ``d_hat`` follows the constraint registry's variable order exactly;
    ``neighbor_evals[:, i, :]`` is the output head at the axis-``i`` offset
    point.  ``lambda_hat`` is the multiplier head with the slack slice mapped
    through softplus (warm starts need s >= 0).
    """

    inputs: np.ndarray  # (B, n_in)
    y_hat: np.ndarray  # (B, n_y)
    lambda_hat: np.ndarray  # (B, multiplier_dim)
    d_hat: np.ndarray  # (B, n_d)
    neighbor_evals: np.ndarray  # (B, n_axes, n_y) or (B, 0, 0)
    params: dict = field(default_factory=dict)


# --------------------------------------------------------- scalar-generic path
def apply_mlp(weight_rows, bias_rows, xs, n_y):
    """One forward pass over payload scalars; returns (y list, lambda list).

    ``weight_rows``/``bias_rows`` are nested lists whose entries may be
    floats, tape refs or shared-slot refs; ``xs`` entries may additionally be
    duals or batched rows.  Accumulation goes through the fused
    multiply-add so traced passes hit the kernel's hot path.
    """
    h = list(xs)
    last = len(weight_rows) - 1
    for li, (W, b) in enumerate(zip(weight_rows, bias_rows)):
        nxt = []
        for k in range(len(W)):
            acc = b[k]
            row = W[k]
            for j in range(len(h)):
                acc = duals.fused_muladd(acc, row[j], h[j])
            nxt.append(duals.tanh(acc) if li < last else acc)
        h = nxt
    return h[:n_y], h[n_y:]


def standardize(params: NetworkParams, point):
    return [
        (point[i] - params.input_mu[i]) / params.input_sigma[i]
        for i in range(params.config.input_dim)
    ]


def forward(params: NetworkParams, point):
    """Single dense pass at one point (or batched rows); returns (y, lam)
    as lists of payloads.  Heads are two slices of the final linear layer."""
    zs = standardize(params, point)
    return apply_mlp(params.weights, params.biases, zs, params.config.output_dim)


def forward_with_derivatives(
    params: NetworkParams,
    point,
    registry: DerivRegistry,
    delta: float,
    n_axes: int,
    n_slack: int = 0,
) -> BackboneBundle:
    """Scalar-path bundle: one second-order dual pass per axis fills the
    registry's derivative variables, one extra forward pass per axis supplies
    the neighbor evaluations."""
    n_y = params.config.output_dim
    zs = standardize(params, point)
    need2 = {v.axis for v in registry.vars if v.order == 2}
    center_y, center_lam = None, None
    d1 = {}
    d2 = {}
    for axis in range(params.config.input_dim):
        seed = 1.0 / params.input_sigma[axis]
        if axis in need2:
            xs = [
                duals.Dual2(z, seed if i == axis else 0.0)
                for i, z in enumerate(zs)
            ]
        else:
            xs = [
                duals.Dual(z, seed if i == axis else 0.0)
                for i, z in enumerate(zs)
            ]
        ys, lams = apply_mlp(params.weights, params.biases, xs, n_y)
        if center_y is None:
            center_y = [y.v for y in ys]
            center_lam = [l.v for l in lams]
        for p, y in enumerate(ys):
            d1[(p, axis)] = y.d1
            if axis in need2:
                d2[(p, axis)] = y.d2
    d_hat = []
    for var in registry.vars:
        d_hat.append(d1[(var.output, var.axis)] if var.order == 1 else d2[(var.output, var.axis)])
    neighbors = []
    for axis in range(n_axes):
        shifted = list(zs)
        shifted[axis] = shifted[axis] + delta / params.input_sigma[axis]
        ys, _ = apply_mlp(params.weights, params.biases, shifted, n_y)
        neighbors.append(ys)
    if n_slack:
        center_lam = center_lam[:-n_slack] + [
            duals.softplus(s) for s in center_lam[-n_slack:]
        ]
    return BackboneBundle(
        inputs=np.atleast_2d(np.asarray(point, dtype=np.float64)),
        y_hat=_stack_row(center_y),
        lambda_hat=_stack_row(center_lam),
        d_hat=_stack_row(d_hat),
        neighbor_evals=_stack_neighbors(neighbors),
        params=dict(params.phys),
    )


def _stack_row(vals):
    if not vals:
        return np.zeros((1, 0))
    arr = np.stack([np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in vals], axis=-1)
    return np.atleast_2d(arr)


def _stack_neighbors(neighbors):
    if not neighbors:
        return np.zeros((1, 0, 0))
    rows = [_stack_row(ys) for ys in neighbors]
    return np.stack(rows, axis=1)


# ----------------------------------------------------------------- fast path
def forward_batched(params: NetworkParams, X: np.ndarray):
    """Matmul pass over points X (B, n_in); returns (Y (B, n_y), LAM)."""
    H = (X - params.input_mu) / params.input_sigma
    last = len(params.weights) - 1
    for li, (W, b) in enumerate(zip(params.weights, params.biases)):
        H = H @ W.T + b
        if li < last:
            H = np.tanh(H)
    n_y = params.config.output_dim
    return H[:, :n_y], H[:, n_y:]


def bundle_batched(
    params: NetworkParams,
    X: np.ndarray,
    registry: DerivRegistry,
    delta: float,
    n_axes: int,
    n_slack: int = 0,
) -> BackboneBundle:
    """Matmul bundle: forward-mode first/second derivative propagation per
    axis plus the neighbor passes, in physical units."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B, n_in = X.shape
    n_y = params.config.output_dim
    Z = (X - params.input_mu) / params.input_sigma
    need2 = {v.axis for v in registry.vars if v.order == 2}
    last = len(params.weights) - 1

    Y = LAM = None
    D1 = np.zeros((B, n_in, n_y))
    D2 = np.zeros((B, n_in, n_y))
    for axis in range(n_in):
        H = Z
        D = np.zeros_like(Z)
        D[:, axis] = 1.0 / params.input_sigma[axis]
        E = np.zeros_like(Z)
        for li, (W, b) in enumerate(zip(params.weights, params.biases)):
            A = H @ W.T + b
            DA = D @ W.T
            EA = E @ W.T
            if li < last:
                H = np.tanh(A)
                u = 1.0 - H * H
                D = u * DA
                E = u * EA - 2.0 * H * u * DA * DA
            else:
                H, D, E = A, DA, EA
        if Y is None:
            Y, LAM = H[:, :n_y], H[:, n_y:]
        D1[:, axis] = D[:, :n_y]
        if axis in need2:
            D2[:, axis] = E[:, :n_y]

    d_cols = []
    for var in registry.vars:
        src = D1 if var.order == 1 else D2
        d_cols.append(src[:, var.axis, var.output])
    d_hat = np.stack(d_cols, axis=1) if d_cols else np.zeros((B, 0))

    neigh = np.zeros((B, n_axes, n_y))
    for axis in range(n_axes):
        Xs = X.copy()
        Xs[:, axis] += delta
        neigh[:, axis, :] = forward_batched(params, Xs)[0]

    lam = LAM.copy()
    if n_slack:
        lam[:, -n_slack:] = np.logaddexp(0.0, lam[:, -n_slack:])
    return BackboneBundle(
        inputs=X,
        y_hat=Y,
        lambda_hat=lam,
        d_hat=d_hat,
        neighbor_evals=neigh,
        params=dict(params.phys),
    )


def input_jacobian_batched(params: NetworkParams, X: np.ndarray):
    """d y_hat / d inputs, (B, n_y, n_in), physical units."""
    X = np.atleast_2d(X)
    B, n_in = X.shape
    n_y = params.config.output_dim
    out = np.zeros((B, n_y, n_in))
    Z = (X - params.input_mu) / params.input_sigma
    last = len(params.weights) - 1
    for axis in range(n_in):
        H = Z
        D = np.zeros_like(Z)
        D[:, axis] = 1.0 / params.input_sigma[axis]
        for li, (W, b) in enumerate(zip(params.weights, params.biases)):
            A = H @ W.T + b
            DA = D @ W.T
            if li < last:
                H = np.tanh(A)
                D = (1.0 - H * H) * DA
            else:
                H, D = A, DA
        out[:, :, axis] = D[:, :n_y]
    return out


# --------------------------------------------------------------- checkpointing
def save_checkpoint(path, params: NetworkParams):
    """Versioned npz of named arrays; see README for the exact layout."""
    arrays = {
        "version": np.array([CHECKPOINT_VERSION]),
        "dims": np.array(
            [
                params.config.input_dim,
                params.config.output_dim,
                params.config.multiplier_dim,
                params.config.hidden_dim,
                params.config.model_depth,
                params.config.seed,
            ]
        ),
        "input_mu": params.input_mu,
        "input_sigma": params.input_sigma,
        "phys_names": np.array(sorted(params.phys), dtype="U32"),
        "phys_values": np.array([params.phys[k] for k in sorted(params.phys)]),
        "activated": np.array([1 if params.activated else 0]),
    }
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    np.savez(path, **arrays)


def load_checkpoint(path) -> NetworkParams:
    data = np.load(path)
    if int(data["version"][0]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data['version'][0]}")
    d = data["dims"]
    config = BackboneConfig(
        input_dim=int(d[0]),
        output_dim=int(d[1]),
        multiplier_dim=int(d[2]),
        hidden_dim=int(d[3]),
        model_depth=int(d[4]),
        seed=int(d[5]),
    )
    weights, biases = [], []
    for i in range(config.model_depth + 1):
        weights.append(data[f"W{i}"])
        biases.append(data[f"b{i}"])
    phys = {
        str(name): float(v)
        for name, v in zip(data["phys_names"], data["phys_values"])
    }
    return NetworkParams(
        config=config,
        weights=weights,
        biases=biases,
        phys=phys,
        input_mu=data["input_mu"],
        input_sigma=data["input_sigma"],
        activated=bool(data["activated"][0]) if "activated" in data else True,
    )
