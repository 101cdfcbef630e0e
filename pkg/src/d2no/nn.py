"""Dense feed-forward networks with hand-written backprop and first-order optimizers.

Weights are stored out x in, so a layer computes ``x @ W.T + b`` on a batch of
row vectors. Everything is float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient contains NaN or inf."""


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # derivative expressed through the cached pre/post activations
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list  # per-layer pre-activations
    post: list  # per-layer post-activations
    weights: tuple = ()  # the weight arrays the forward pass saw; used to spot stale caches


class Mlp:
    """A chain of dense layers. The last layer is affine."""

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if layers[-1].activation != "identity":
            raise ValueError("final layer must use the identity activation")
        self.layers = layers

    def __repr__(self):
        return f"Mlp(dims={self.dims}, activation={self.activation!r})"

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activation(self) -> str:
        return self.layers[0].activation if len(self.layers) > 1 else "identity"

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        params = list(params)
        if len(params) != 2 * len(self.layers):
            raise ValueError("parameter list does not match layer count")
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                raise ValueError(f"shape mismatch in layer {i}")
            layer.weights, layer.bias = w, b

    def copy(self) -> "Mlp":
        return Mlp(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (batch, {self.in_dim}), got {x.shape}")
        pre, post = [], []
        a = x
        for layer in self.layers:
            z = a @ layer.weights.T + layer.bias
            a = _act(layer.activation, z)
            pre.append(z)
            post.append(a)
        return a, ForwardCache(x, pre, post, tuple(l.weights for l in self.layers))

    def backward(
        self, cache: ForwardCache, upstream: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        if len(cache.pre) != len(self.layers) or any(
            w is not l.weights for w, l in zip(cache.weights, self.layers)
        ):
            raise ValueError("stale forward cache: parameters changed since the forward pass")
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != cache.post[-1].shape:
            raise ValueError(
                f"upstream shape {upstream.shape} does not match output {cache.post[-1].shape}"
            )
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        delta = upstream
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            delta = delta * _act_grad(layer.activation, cache.pre[i], cache.post[i])
            a_prev = cache.post[i - 1] if i > 0 else cache.inputs
            grads[2 * i] = delta.T @ a_prev
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ layer.weights
        return grads, delta

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


class StackedMlp:
    """K independent MLPs on the same input whose scalar-or-vector outputs are concatenated.

    This is the "stacked" branch layout, where every basis coefficient has its own
    small network (e.g. K copies of a 75 -> 100 -> 1 net).
    """

    def __init__(self, nets: Sequence[Mlp]):
        nets = list(nets)
        if not nets:
            raise ValueError("empty stack")
        if len({n.in_dim for n in nets}) != 1:
            raise ValueError("stacked nets must share an input dimension")
        self.nets = nets

    def __repr__(self):
        return f"StackedMlp({len(self.nets)} x {self.nets[0].dims})"

    @property
    def dims(self) -> list[int]:
        return self.nets[0].dims

    @property
    def activation(self) -> str:
        return self.nets[0].activation

    @property
    def in_dim(self) -> int:
        return self.nets[0].in_dim

    @property
    def out_dim(self) -> int:
        return sum(n.out_dim for n in self.nets)

    def params(self) -> list[np.ndarray]:
        return [p for n in self.nets for p in n.params()]

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        params = list(params)
        i = 0
        for n in self.nets:
            k = 2 * len(n.layers)
            n.set_params(params[i : i + k])
            i += k
        if i != len(params):
            raise ValueError("parameter list does not match stack")

    def copy(self) -> "StackedMlp":
        return StackedMlp([n.copy() for n in self.nets])

    def forward(self, x: np.ndarray):
        outs, caches = zip(*(n.forward(x) for n in self.nets))
        return np.concatenate(outs, axis=1), list(caches)

    def backward(self, cache, upstream: np.ndarray):
        grads: list[np.ndarray] = []
        dx = None
        col = 0
        for n, c in zip(self.nets, cache):
            g, d = n.backward(c, upstream[:, col : col + n.out_dim])
            col += n.out_dim
            grads.extend(g)
            dx = d if dx is None else dx + d
        return grads, dx

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def mlp_init(layer_dims: Sequence[int], activation: str = "tanh", seed: int = 0) -> Mlp:
    """Glorot-uniform weights, zero biases, identity on the last layer."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output size")
    if any(d <= 0 for d in dims):
        raise ValueError(f"layer dims must be positive, got {dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        act = "identity" if i == len(dims) - 2 else activation
        layers.append(DenseLayer(w, np.zeros(n_out), act))
    return Mlp(layers)


def stacked_init(
    layer_dims: Sequence[int], n_stack: int, activation: str = "tanh", seed: int = 0
) -> StackedMlp:
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(n_stack)
    return StackedMlp([mlp_init(layer_dims, activation, int(s)) for s in seeds])


def mlp_forward(net, x):
    return net.forward(x)


def mlp_backward(net, cache, upstream):
    return net.backward(cache, upstream)


def param_count(net) -> int:
    return int(sum(p.size for p in net.params()))


def flatten(params: Sequence[np.ndarray]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([np.ravel(p) for p in params])


def unflatten(flat: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(p.size for p in like)
    if flat.size != total:
        raise ValueError(f"flat vector has {flat.size} entries, expected {total}")
    out, i = [], 0
    for p in like:
        out.append(flat[i : i + p.size].reshape(p.shape).copy())
        i += p.size
    return out


# -- optimizers -------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list | None = field(default=None, repr=False)
    v: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.kind, self.lr, self.beta1, self.beta2, self.eps, self.step,
            None if self.m is None else [a.copy() for a in self.m],
            None if self.v is None else [a.copy() for a in self.v],
        )


def optimizer_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float | None = None,
) -> tuple[list[np.ndarray], OptimizerState]:
    """One update. Returns fresh parameter arrays; ``state`` is advanced in place.

    ``lr`` overrides ``state.lr`` for this step (used by schedules).
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient entries; step aborted")
    eta = state.lr if lr is None else lr
    if state.kind == "sgd":
        state.step += 1
        return [p - eta * g for p, g in zip(params, grads)], state

    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params) or any(
        m.shape != p.shape for m, p in zip(state.m, params)
    ):
        raise ValueError("optimizer moments do not match the parameter set")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new = []
    for m, v, p, g in zip(state.m, state.v, params, grads):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        new.append(p - (eta / c1) * m / denom)
    return new, state


def finite_diff_grad(
    loss_fn: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    step: float = 1e-6,
) -> list[np.ndarray]:
    """Central differences, one coordinate at a time."""
    if not step > 0:
        raise ValueError("step must be positive")
    work = [np.array(p, dtype=np.float64, copy=True) for p in params]
    grads = [np.zeros_like(p) for p in work]
    for p, g in zip(work, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = float(loss_fn(work))
            flat[j] = orig - step
            down = float(loss_fn(work))
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"non-finite loss while perturbing coordinate {j}")
            gflat[j] = (up - down) / (2.0 * step)
    return grads


# -- checkpoints ------------------------------------------------------------

MAGIC = b"D2NOCKPT"
FORMAT_VERSION = 1


def net_manifest(net) -> dict:
    if isinstance(net, StackedMlp):
        return {
            "type": "stacked",
            "nets": [net_manifest(n) for n in net.nets],
        }
    return {
        "type": "mlp",
        "dims": net.dims,
        "activations": [l.activation for l in net.layers],
    }


def net_from_manifest(spec: dict):
    if spec["type"] == "stacked":
        return StackedMlp([net_from_manifest(s) for s in spec["nets"]])
    dims, acts = spec["dims"], spec["activations"]
    return Mlp(
        [
            DenseLayer(np.zeros((o, i)), np.zeros(o), a)
            for i, o, a in zip(dims[:-1], dims[1:], acts)
        ]
    )


def write_checkpoint(path, manifest: dict, flat: np.ndarray) -> None:
    """Binary container: magic, version, header length, JSON header, LE float64 params.

    The header is duplicated into ``<path>.json``. The file is written to a
    temporary name and renamed, so a crash never leaves a half-written checkpoint.
    """
    path = Path(path)
    flat = np.ascontiguousarray(flat, dtype="<f8")
    manifest = dict(manifest, n_params=int(flat.size), format_version=FORMAT_VERSION)
    header = json.dumps(manifest, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(flat.tobytes())
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    version, hlen = struct.unpack("<II", raw[off : off + 8])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    manifest = json.loads(raw[off : off + hlen])
    flat = np.frombuffer(raw[off + hlen :], dtype="<f8").astype(np.float64)
    if flat.size != manifest["n_params"]:
        raise ValueError(f"{path}: truncated parameter block")
    return manifest, flat


def save_mlp(path, net, optimizer: str | None = None) -> None:
    write_checkpoint(path, {"kind": "net", "net": net_manifest(net), "optimizer": optimizer},
                     flatten(net.params()))


def load_mlp(path):
    manifest, flat = read_checkpoint(path)
    net = net_from_manifest(manifest["net"])
    net.set_params(unflatten(flat, net.params()))
    return net
