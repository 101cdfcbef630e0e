"""DeepONet and D2NO evaluation.

A prediction is the inner product of branch coefficients and trunk basis values,
per output component::

    G(u)(x)_j = sum_k branch(u)[j*K + k] * trunk(x)[j*K + k] + bias_j

A D2NO model keeps one branch per client (each with its own sensor grid and
sensor count) and a single trunk shared by all clients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import (
    Mlp,
    StackedMlp,
    flatten,
    mlp_init,
    net_from_manifest,
    net_manifest,
    read_checkpoint,
    stacked_init,
    unflatten,
    write_checkpoint,
)

_EDGE_TOL = 1e-12


@dataclass(eq=False)
class SensorGrid:
    locations: np.ndarray
    name: str = ""

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.locations, dtype=np.float64))
        if loc.ndim != 1 or loc.size < 1:
            raise ValueError("a sensor grid needs at least one 1-D location")
        if loc.size > 1 and not np.all(np.diff(loc) > 0):
            raise ValueError("sensor locations must be strictly increasing")
        if not np.all(np.isfinite(loc)):
            raise ValueError("sensor locations must be finite")
        self.locations = loc

    @property
    def count(self) -> int:
        return int(self.locations.size)

    def __len__(self):
        return self.count

    def matches(self, other: "SensorGrid") -> bool:
        return self is other or np.array_equal(self.locations, other.locations)

    def __repr__(self):
        lo, hi = self.locations[0], self.locations[-1]
        return f"SensorGrid({self.name!r}, m={self.count}, [{lo:.4g}, {hi:.4g}])"


@dataclass
class TabulatedFunction:
    """A function known through its values on a fine, increasing grid."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grid.shape != self.values.shape or self.grid.ndim != 1:
            raise ValueError("grid and values must be 1-D arrays of equal length")

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.grid[0]), float(self.grid[-1])


@dataclass
class DiscretizedFunction:
    grid: SensorGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.count,):
            raise ValueError(
                f"{self.values.size} values for a grid of {self.grid.count} sensors"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("discretized values must be finite")


def _check_inside(points: np.ndarray, lo: float, hi: float) -> None:
    tol = _EDGE_TOL * max(1.0, abs(lo), abs(hi))
    if points.min() < lo - tol or points.max() > hi + tol:
        raise ValueError(
            f"sensor locations [{points.min():.6g}, {points.max():.6g}] "
            f"extrapolate beyond the tabulated domain [{lo:.6g}, {hi:.6g}]"
        )


def interp_rows(nodes: np.ndarray, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Linear interpolation of every row of ``values`` (tabulated on ``nodes``) at ``points``."""
    nodes = np.asarray(nodes, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    _check_inside(points, nodes[0], nodes[-1])
    values = np.atleast_2d(values)
    idx = np.clip(np.searchsorted(nodes, points, side="right") - 1, 0, nodes.size - 2)
    x0, x1 = nodes[idx], nodes[idx + 1]
    w = np.clip((points - x0) / (x1 - x0), 0.0, 1.0)
    return values[:, idx] * (1.0 - w) + values[:, idx + 1] * w


def sample_function(f: TabulatedFunction, grid: SensorGrid) -> DiscretizedFunction:
    return DiscretizedFunction(grid, interp_rows(f.grid, f.values, grid.locations)[0])


# -- DeepONet ---------------------------------------------------------------


@dataclass
class DeepOnet:
    branch: Mlp | StackedMlp
    trunk: Mlp
    n_basis: int
    n_outputs: int = 1
    bias: np.ndarray | None = None
    use_bias: bool = True
    grid: SensorGrid | None = None
    # trunk sees (x - query_shift) / query_scale
    query_shift: float = 0.0
    query_scale: float = 1.0

    def __post_init__(self):
        width = self.n_basis * self.n_outputs
        if self.branch.out_dim != width or self.trunk.out_dim != width:
            raise ValueError(
                f"branch ({self.branch.out_dim}) and trunk ({self.trunk.out_dim}) outputs "
                f"must both equal K*q = {width}"
            )
        if self.bias is None:
            self.bias = np.zeros(self.n_outputs)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.grid is not None and self.grid.count != self.branch.in_dim:
            raise ValueError("sensor grid size does not match branch input dim")

    @property
    def sensor_count(self) -> int:
        return self.branch.in_dim


@dataclass
class DeepOnetGrads:
    branch: list
    trunk: list
    bias: np.ndarray


@dataclass
class _Cache:
    branch_out: np.ndarray  # (b, q*K)
    trunk_out: np.ndarray  # (n, q*K)
    branch_cache: object
    trunk_cache: object


def as_queries(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[:, None]
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("query batch must be a nonempty (n, d) array")
    return xs


def _inputs(model: DeepOnet, u_hat) -> tuple[np.ndarray, bool]:
    if isinstance(u_hat, DiscretizedFunction):
        if model.grid is not None and not model.grid.matches(u_hat.grid):
            raise ValueError("input function is discretized on a different sensor grid")
        u_hat = u_hat.values
    u = np.asarray(u_hat, dtype=np.float64)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    if u.shape[1] != model.branch.in_dim:
        raise ValueError(
            f"input has {u.shape[1]} sensor values, branch expects {model.branch.in_dim}"
        )
    return u, single


def forward_batch(model: DeepOnet, u: np.ndarray, xs: np.ndarray):
    """Predictions for a batch of discretized inputs at shared query points.

    ``u`` is (b, m) and ``xs`` (n, d); returns (b, n, q) and a cache for
    :func:`backward_batch`.
    """
    K, q = model.n_basis, model.n_outputs
    bo, bc = model.branch.forward(u)
    to, tc = model.trunk.forward((xs - model.query_shift) / model.query_scale)
    out = np.empty((bo.shape[0], to.shape[0], q))
    for j in range(q):
        s = slice(j * K, (j + 1) * K)
        out[:, :, j] = bo[:, s] @ to[:, s].T
    if model.use_bias:
        out += model.bias
    return out, _Cache(bo, to, bc, tc)


def backward_batch(
    model: DeepOnet, cache: _Cache, upstream: np.ndarray, need_branch=True, need_trunk=True
) -> DeepOnetGrads:
    K, q = model.n_basis, model.n_outputs
    upstream = np.asarray(upstream, dtype=np.float64)
    bo, to = cache.branch_out, cache.trunk_out
    expect = (bo.shape[0], to.shape[0], q)
    if upstream.shape != expect:
        raise ValueError(f"upstream shape {upstream.shape} does not match output {expect}")
    up = [np.ascontiguousarray(upstream[:, :, j]) for j in range(q)]
    branch_grads = trunk_grads = None
    if need_branch:
        dB = np.empty_like(bo)
        for j in range(q):
            s = slice(j * K, (j + 1) * K)
            dB[:, s] = up[j] @ to[:, s]
        branch_grads, _ = model.branch.backward(cache.branch_cache, dB)
    if need_trunk:
        dT = np.empty_like(to)
        for j in range(q):
            s = slice(j * K, (j + 1) * K)
            dT[:, s] = up[j].T @ bo[:, s]
        trunk_grads, _ = model.trunk.backward(cache.trunk_cache, dT)
    bias = upstream.sum(axis=(0, 1)) if model.use_bias else np.zeros(q)
    return DeepOnetGrads(branch_grads, trunk_grads, bias)


def deeponet_forward(model: DeepOnet, u_hat, xs) -> np.ndarray:
    """(|xs|, q) for a single input function, (b, |xs|, q) for a batch of them."""
    u, single = _inputs(model, u_hat)
    out, _ = forward_batch(model, u, as_queries(xs))
    return out[0] if single else out


def deeponet_backward(model: DeepOnet, u_hat, xs, upstream) -> DeepOnetGrads:
    """Exact gradients of ``sum(upstream * deeponet_forward(...))``."""
    u, single = _inputs(model, u_hat)
    _, cache = forward_batch(model, u, as_queries(xs))
    upstream = np.asarray(upstream, dtype=np.float64)
    if single:
        upstream = upstream[None]
    return backward_batch(model, cache, upstream)


def deeponet_init(
    sensor_count: int,
    branch_hidden: Sequence[int],
    trunk_dims: Sequence[int],
    n_basis: int,
    n_outputs: int = 1,
    seed: int = 0,
    stacked: bool = False,
    activation: str = "tanh",
    grid: SensorGrid | None = None,
    use_bias: bool = True,
    query_shift: float = 0.0,
    query_scale: float = 1.0,
) -> DeepOnet:
    ss = np.random.SeedSequence(seed)
    s_branch, s_trunk = (int(s) for s in ss.generate_state(2))
    trunk = mlp_init(list(trunk_dims[:-1]) + [n_basis * n_outputs], activation, s_trunk)
    branch = make_branch(sensor_count, branch_hidden, n_basis * n_outputs, s_branch,
                         stacked, activation)
    return DeepOnet(branch, trunk, n_basis, n_outputs, None, use_bias, grid,
                    query_shift, query_scale)


def make_branch(sensor_count, hidden, width, seed, stacked=False, activation="tanh"):
    if stacked:
        return stacked_init([sensor_count, *hidden, 1], width, activation, seed)
    return mlp_init([sensor_count, *hidden, width], activation, seed)


# -- D2NO -------------------------------------------------------------------


@dataclass
class ClientBranch:
    client_id: str
    grid: SensorGrid
    branch: Mlp | StackedMlp
    bias: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grid.count != self.branch.in_dim:
            raise ValueError(
                f"client {self.client_id!r}: grid has {self.grid.count} sensors, "
                f"branch expects {self.branch.in_dim}"
            )


class D2noModel:
    """Per-client branches plus one shared trunk."""

    def __init__(
        self,
        clients: Sequence[ClientBranch],
        trunk: Mlp,
        n_basis: int,
        n_outputs: int = 1,
        use_bias: bool = True,
        query_shift: float = 0.0,
        query_scale: float = 1.0,
    ):
        clients = list(clients)
        if not clients:
            raise ValueError("a D2NO model needs at least one client")
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate client ids {ids}")
        width = n_basis * n_outputs
        if trunk.out_dim != width:
            raise ValueError(f"trunk output {trunk.out_dim} != K*q = {width}")
        for c in clients:
            if c.branch.out_dim != width:
                raise ValueError(
                    f"client {c.client_id!r} branch output {c.branch.out_dim} != K*q = {width}"
                )
            if c.bias is None:
                c.bias = np.zeros(n_outputs)
        self.clients = {c.client_id: c for c in clients}
        self.trunk = trunk
        self.n_basis = n_basis
        self.n_outputs = n_outputs
        self.use_bias = use_bias
        self.query_shift = query_shift
        self.query_scale = query_scale

    def __repr__(self):
        parts = ", ".join(f"{c.client_id}:m={c.grid.count}" for c in self.clients.values())
        return f"D2noModel([{parts}], trunk={self.trunk.dims}, K={self.n_basis}, q={self.n_outputs})"

    @property
    def client_ids(self) -> list[str]:
        return list(self.clients)

    def client(self, client_id) -> ClientBranch:
        try:
            return self.clients[client_id]
        except KeyError:
            raise KeyError(f"unknown client {client_id!r}; have {self.client_ids}") from None

    def view(self, client_id) -> DeepOnet:
        """The client's DeepONet. Shares parameter arrays with this model."""
        c = self.client(client_id)
        return DeepOnet(c.branch, self.trunk, self.n_basis, self.n_outputs, c.bias,
                        self.use_bias, c.grid, self.query_shift, self.query_scale)

    def copy(self) -> "D2noModel":
        return D2noModel(
            [ClientBranch(c.client_id, c.grid, c.branch.copy(), c.bias.copy())
             for c in self.clients.values()],
            self.trunk.copy(), self.n_basis, self.n_outputs, self.use_bias,
            self.query_shift, self.query_scale,
        )

    @classmethod
    def from_deeponet(cls, model: DeepOnet, client_id: str = "all") -> "D2noModel":
        grid = model.grid or SensorGrid(np.arange(model.sensor_count, dtype=float))
        return cls([ClientBranch(client_id, grid, model.branch, model.bias)], model.trunk,
                   model.n_basis, model.n_outputs, model.use_bias,
                   model.query_shift, model.query_scale)

    def shared_params(self) -> list[np.ndarray]:
        return self.trunk.params()

    def unshared_params(self, client_id) -> list[np.ndarray]:
        c = self.client(client_id)
        return c.branch.params() + ([c.bias] if self.use_bias else [])

    def set_unshared_params(self, client_id, params) -> None:
        c = self.client(client_id)
        n = len(c.branch.params())
        c.branch.set_params(params[:n])
        if self.use_bias:
            c.bias = params[n]


def d2no_init(
    grids: dict[str, SensorGrid],
    branch_hidden: dict[str, Sequence[int]] | Sequence[int],
    trunk_dims: Sequence[int],
    n_basis: int,
    n_outputs: int = 1,
    seed: int = 0,
    stacked: bool = False,
    activation: str = "tanh",
    use_bias: bool = True,
    query_shift: float = 0.0,
    query_scale: float = 1.0,
) -> D2noModel:
    """Build a model with one branch per entry of ``grids`` (in insertion order).

    Seeding matches :func:`deeponet_init` for the first client, so a one-client
    D2NO starts from exactly the same parameters as the equivalent DeepONet.
    """
    ss = np.random.SeedSequence(seed)
    states = ss.generate_state(1 + len(grids))
    s_branches = [int(states[0])] + [int(s) for s in states[2:]]
    s_trunk = int(states[1])
    width = n_basis * n_outputs
    trunk = mlp_init(list(trunk_dims[:-1]) + [width], activation, s_trunk)
    clients = []
    for (cid, grid), s in zip(grids.items(), s_branches):
        hidden = branch_hidden[cid] if isinstance(branch_hidden, dict) else branch_hidden
        branch = make_branch(grid.count, hidden, width, s, stacked, activation)
        clients.append(ClientBranch(cid, grid, branch, np.zeros(n_outputs)))
    return D2noModel(clients, trunk, n_basis, n_outputs, use_bias, query_shift, query_scale)


def d2no_forward(model: D2noModel, client_id, u_hat, xs) -> np.ndarray:
    return deeponet_forward(model.view(client_id), u_hat, xs)


# -- checkpoints ------------------------------------------------------------


def model_manifest(model: D2noModel | DeepOnet) -> dict:
    if isinstance(model, DeepOnet):
        model = D2noModel.from_deeponet(model)
        kind = "deeponet"
    else:
        kind = "d2no"
    return {
        "kind": kind,
        "n_basis": model.n_basis,
        "n_outputs": model.n_outputs,
        "use_bias": model.use_bias,
        "query_shift": model.query_shift,
        "query_scale": model.query_scale,
        "trunk": net_manifest(model.trunk),
        "clients": [
            {
                "client_id": c.client_id,
                "sensors": c.grid.locations.tolist(),
                "grid_name": c.grid.name,
                "branch": net_manifest(c.branch),
            }
            for c in model.clients.values()
        ],
    }


def model_params(model: D2noModel | DeepOnet) -> list[np.ndarray]:
    if isinstance(model, DeepOnet):
        model = D2noModel.from_deeponet(model)
    out = []
    for c in model.clients.values():
        out += c.branch.params() + [c.bias]
    return out + model.trunk.params()


def save_model(path, model: D2noModel | DeepOnet, extra: dict | None = None) -> None:
    manifest = model_manifest(model)
    if extra:
        manifest["extra"] = extra
    write_checkpoint(path, manifest, flatten(model_params(model)))


def load_model(path) -> tuple[D2noModel | DeepOnet, dict]:
    manifest, flat = read_checkpoint(path)
    q = manifest["n_outputs"]
    clients = [
        ClientBranch(c["client_id"], SensorGrid(np.array(c["sensors"]), c.get("grid_name", "")),
                     net_from_manifest(c["branch"]), np.zeros(q))
        for c in manifest["clients"]
    ]
    model = D2noModel(clients, net_from_manifest(manifest["trunk"]), manifest["n_basis"], q,
                      manifest["use_bias"], manifest["query_shift"], manifest["query_scale"])
    params = unflatten(flat, model_params(model))
    i = 0
    for c in model.clients.values():
        n = len(c.branch.params())
        c.branch.set_params(params[i : i + n])
        c.bias = params[i + n]
        i += n + 1
    model.trunk.set_params(params[i:])
    if manifest["kind"] == "deeponet":
        return model.view(model.client_ids[0]), manifest
    return model, manifest
