"""Local/global losses and the two D2NO training schedules.

``train_lockstep`` alternates, every iteration, a branch update for each client
(trunk frozen) with one trunk update on the weighted global loss (branches
frozen). ``train_periodic_sync`` gives every client a private trunk replica for
a number of local steps, then averages the replicas into the shared trunk.
Branches are never averaged.

Gradient work is counted in parameter-gradient units: a sample's gradient over
``p`` parameters costs ``p``.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .nn import NonFiniteError, OptimizerState, optimizer_step, param_count
from .operator import (
    D2noModel,
    DeepOnet,
    SensorGrid,
    as_queries,
    backward_batch,
    forward_batch,
)

log = logging.getLogger(__name__)


class TrainingDiverged(NonFiniteError):
    def __init__(self, iteration: int, client_id=None):
        where = f" on client {client_id!r}" if client_id is not None else ""
        super().__init__(f"non-finite loss or gradient at iteration {iteration}{where}")
        self.iteration = iteration
        self.client_id = client_id


def _guarded_step(params, grads, opt, lr, iteration, client_id=None):
    try:
        return optimizer_step(params, grads, opt, lr)[0]
    except NonFiniteError:
        raise TrainingDiverged(iteration, client_id) from None


@dataclass
class ClientDataset:
    client_id: str
    grid: SensorGrid
    inputs: np.ndarray  # (N_c, m_c)
    queries: np.ndarray  # (n, d)
    labels: np.ndarray  # (N_c, n, q)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.queries = as_queries(self.queries)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim == 2:
            self.labels = self.labels[:, :, None]
        if self.inputs.shape[1] != self.grid.count:
            raise ValueError(
                f"client {self.client_id!r}: inputs have {self.inputs.shape[1]} columns "
                f"but the grid has {self.grid.count} sensors"
            )
        if self.labels.shape[:2] != (self.inputs.shape[0], self.queries.shape[0]):
            raise ValueError(
                f"client {self.client_id!r}: labels {self.labels.shape} do not match "
                f"{self.inputs.shape[0]} inputs x {self.queries.shape[0]} queries"
            )

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.labels.shape[2]

    def subset(self, idx) -> "ClientDataset":
        return ClientDataset(self.client_id, self.grid, self.inputs[idx], self.queries,
                             self.labels[idx])


def merge_datasets(datasets: Sequence[ClientDataset], client_id: str = "pooled") -> ClientDataset:
    """Pool datasets that share one sensor grid and one query grid."""
    first = datasets[0]
    for d in datasets[1:]:
        if not d.grid.matches(first.grid):
            raise ValueError("pooled datasets must share a sensor grid; resample first")
        if not np.array_equal(d.queries, first.queries):
            raise ValueError("pooled datasets must share query points")
    return ClientDataset(
        client_id, first.grid,
        np.concatenate([d.inputs for d in datasets]),
        first.queries,
        np.concatenate([d.labels for d in datasets]),
    )


@dataclass
class TrainConfig:
    mode: str = "lockstep"  # "lockstep" or "periodic_sync"
    iterations: int = 1000  # lockstep
    # lockstep trunk gradient taken after the branch updates ("sequential") or at the
    # iterate the branch gradients saw ("simultaneous")
    lockstep_order: str = "sequential"
    rounds: int = 10  # periodic_sync
    sync_period: int = 100  # local updates per round
    sync_unit: str = "steps"  # "steps" or "epochs"
    lr: float = 1e-3  # trunk
    client_lr: dict | float | None = None  # per-client branch rates; defaults to lr
    weights: dict | None = None  # w_c, default 1 for every client
    batch_size: int | None = None  # None: full batch
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    # step decay: rate multiplied by lr_decay every lr_decay_every iterations (lockstep)
    # or rounds (periodic_sync); 0 disables it
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("lockstep", "periodic_sync"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.lockstep_order not in ("sequential", "simultaneous"):
            raise ValueError(f"unknown lockstep order {self.lockstep_order!r}")
        if self.sync_unit not in ("steps", "epochs"):
            raise ValueError(f"unknown sync unit {self.sync_unit!r}")
        if self.iterations < 0 or self.rounds < 0 or self.sync_period < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def weight(self, client_id) -> float:
        if self.weights is None:
            return 1.0
        return float(self.weights.get(client_id, 1.0))

    def optimizer_state(self, lr: float) -> OptimizerState:
        return OptimizerState(self.optimizer, lr, self.beta1, self.beta2)

    def branch_lr(self, client_id) -> float:
        if self.client_lr is None:
            return self.lr
        if isinstance(self.client_lr, dict):
            return float(self.client_lr.get(client_id, self.lr))
        return float(self.client_lr)

    def scheduled(self, base: float, step: int) -> float:
        if self.lr_decay_every <= 0:
            return base
        return base * self.lr_decay ** (step // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Metrics:
    client_loss: dict = field(default_factory=dict)  # client -> per-update batch losses
    global_loss: list = field(default_factory=list)  # weighted sum per iteration / round
    work: dict = field(default_factory=dict)  # client -> gradient work
    updates: dict = field(default_factory=dict)  # client -> optimizer steps taken
    samples_seen: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def total_work(self) -> int:
        return int(sum(self.work.values()))

    def _bump(self, cid, work, samples):
        self.work[cid] = self.work.get(cid, 0) + int(work)
        self.samples_seen[cid] = self.samples_seen.get(cid, 0) + int(samples)

    def to_dict(self) -> dict:
        return {
            "client_loss": self.client_loss,
            "global_loss": self.global_loss,
            "work": self.work,
            "total_work": self.total_work,
            "updates": self.updates,
            "samples_seen": self.samples_seen,
            "wall_clock": self.wall_clock,
        }


class BatchStream:
    """Shuffled mini-batches that reshuffle at each epoch boundary.

    With ``batch_size`` None (or >= n) every batch is the full dataset, in order.
    """

    def __init__(self, n: int, batch_size: int | None, seed):
        self.n = n
        self.full = batch_size is None or batch_size >= n
        self.batch_size = n if self.full else batch_size
        self.rng = np.random.default_rng(seed)
        self._perm = None
        self._pos = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def next(self) -> np.ndarray:
        if self.full:
            return np.arange(self.n)
        if self._perm is None or self._pos >= self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def batch_seed(seed: int, client_index: int):
    return [int(seed), 7919, int(client_index)]


# -- losses -----------------------------------------------------------------


def _residual(model: DeepOnet, data: ClientDataset, idx):
    out, cache = forward_batch(model, data.inputs[idx], data.queries)
    return out - data.labels[idx], cache


def _check_client(model: D2noModel, data: ClientDataset):
    c = model.client(data.client_id)
    if not c.grid.matches(data.grid):
        raise ValueError(f"client {data.client_id!r}: dataset grid differs from the model's")


def local_loss(model: D2noModel, client_id, data: ClientDataset, batch=None) -> float:
    """(1/|batch|) * sum over samples, queries and components of squared error."""
    if data.client_id != client_id:
        raise ValueError(f"dataset belongs to {data.client_id!r}, not {client_id!r}")
    _check_client(model, data)
    idx = np.arange(len(data)) if batch is None else np.asarray(batch)
    if idx.size == 0:
        raise ValueError("empty batch")
    r, _ = _residual(model.view(client_id), data, idx)
    return float(np.sum(r * r) / idx.size)


def global_loss(model: D2noModel, datasets: Sequence[ClientDataset], weights=None) -> float:
    ids = [d.client_id for d in datasets]
    if sorted(ids) != sorted(model.client_ids):
        raise ValueError(f"datasets {ids} do not match model clients {model.client_ids}")
    total = 0.0
    for d in datasets:
        w = 1.0 if weights is None else float(weights[d.client_id])
        total += w * local_loss(model, d.client_id, d)
    return total


# -- lockstep ---------------------------------------------------------------


def _ordered(model: D2noModel, datasets) -> list[ClientDataset]:
    by_id = {d.client_id: d for d in datasets}
    if sorted(by_id) != sorted(model.client_ids) or len(by_id) != len(datasets):
        raise ValueError(
            f"need exactly one dataset per client {model.client_ids}, got {list(by_id)}"
        )
    for d in datasets:
        _check_client(model, d)
    return [by_id[c] for c in model.client_ids]


def _map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def train_lockstep(model: D2noModel, datasets: Sequence[ClientDataset], cfg: TrainConfig):
    """Returns a trained copy of ``model`` and its :class:`Metrics`."""
    if cfg.mode != "lockstep":
        raise ValueError("train_lockstep needs cfg.mode == 'lockstep'")
    model = model.copy()
    data = _ordered(model, datasets)
    ids = model.client_ids
    metrics = Metrics(client_loss={c: [] for c in ids}, work={c: 0 for c in ids},
                      updates={c: 0 for c in ids}, samples_seen={c: 0 for c in ids})
    streams = {c: BatchStream(len(d), cfg.batch_size, batch_seed(cfg.seed, i))
               for i, (c, d) in enumerate(zip(ids, data))}
    client_opt = {c: cfg.optimizer_state(cfg.branch_lr(c)) for c in ids}
    trunk_opt = cfg.optimizer_state(cfg.lr)
    p_trunk = param_count(model.trunk)
    simultaneous = cfg.lockstep_order == "simultaneous"
    t0 = time.perf_counter()

    for it in range(cfg.iterations):
        batches = {c: streams[c].next() for c in ids}

        def client_step(pair):
            cid, d = pair
            view = model.view(cid)
            idx = batches[cid]
            r, cache = _residual(view, d, idx)
            loss = float(np.sum(r * r) / idx.size)
            if not np.isfinite(loss):
                raise TrainingDiverged(it, cid)
            g = backward_batch(view, cache, 2.0 * r / idx.size, need_trunk=simultaneous)
            grads = g.branch + ([g.bias] if model.use_bias else [])
            new = _guarded_step(model.unshared_params(cid), grads, client_opt[cid],
                                cfg.scheduled(client_opt[cid].lr, it), it, cid)
            tg = [cfg.weight(cid) * a for a in g.trunk] if simultaneous else None
            return cid, new, loss, tg

        # trunk frozen: clients are independent
        results = _map(client_step, list(zip(ids, data)), cfg.workers)
        total = 0.0
        for cid, new, loss, _ in results:
            model.set_unshared_params(cid, new)
            p = sum(a.size for a in new)
            metrics._bump(cid, batches[cid].size * p, batches[cid].size)
            metrics.client_loss[cid].append(loss)
            metrics.updates[cid] += 1
            total += cfg.weight(cid) * loss
        metrics.global_loss.append(total)

        # branches frozen: trunk step on the weighted global loss, fixed reduction order
        def trunk_grad(pair):
            cid, d = pair
            view = model.view(cid)
            idx = batches[cid]
            r, cache = _residual(view, d, idx)
            g = backward_batch(view, cache, cfg.weight(cid) * 2.0 * r / idx.size,
                               need_branch=False)
            return g.trunk

        if simultaneous:
            per_client = [tg for *_, tg in results]
        else:
            per_client = _map(trunk_grad, list(zip(ids, data)), cfg.workers)
        grads = per_client[0]
        for g in per_client[1:]:
            grads = [a + b for a, b in zip(grads, g)]
        for cid in ids:
            metrics._bump(cid, batches[cid].size * p_trunk, 0)
        new = _guarded_step(model.trunk.params(), grads, trunk_opt, cfg.scheduled(cfg.lr, it), it)
        model.trunk.set_params(new)

    metrics.wall_clock = time.perf_counter() - t0
    return model, metrics


def trunk_gradient(model: D2noModel, datasets: Sequence[ClientDataset], weights=None):
    """Full-data gradient of the (weighted) global loss w.r.t. the trunk, plus per-client parts."""
    parts = []
    for d in _ordered(model, datasets):
        w = 1.0 if weights is None else float(weights[d.client_id])
        view = model.view(d.client_id)
        idx = np.arange(len(d))
        r, cache = _residual(view, d, idx)
        parts.append(backward_batch(view, cache, w * 2.0 * r / idx.size, need_branch=False).trunk)
    total = parts[0]
    for g in parts[1:]:
        total = [a + b for a, b in zip(total, g)]
    return total, parts


# -- periodic synchronization ----------------------------------------------


@dataclass
class SyncState:
    replicas: dict  # client -> list of trunk parameter arrays
    round: int = 0


def aggregate_trunk(replicas: dict, weights: dict) -> list[np.ndarray]:
    """Elementwise weighted mean of trunk replicas, reduced in client order."""
    total_w = sum(weights.values())
    if not total_w > 0:
        raise ValueError("client weights must have a positive sum")
    acc = None
    for cid, params in replicas.items():
        share = weights[cid] / total_w
        scaled = [share * p for p in params]
        acc = scaled if acc is None else [a + s for a, s in zip(acc, scaled)]
    return acc


def train_periodic_sync(model: D2noModel, datasets: Sequence[ClientDataset], cfg: TrainConfig):
    """Rounds of broadcast -> local updates -> trunk averaging."""
    if cfg.mode != "periodic_sync":
        raise ValueError("train_periodic_sync needs cfg.mode == 'periodic_sync'")
    model = model.copy()
    data = _ordered(model, datasets)
    ids = model.client_ids
    weights = {c: cfg.weight(c) for c in ids}
    if not sum(weights.values()) > 0:
        raise ValueError("client weights must have a positive sum")
    metrics = Metrics(client_loss={c: [] for c in ids}, work={c: 0 for c in ids},
                      updates={c: 0 for c in ids}, samples_seen={c: 0 for c in ids})
    streams = {c: BatchStream(len(d), cfg.batch_size, batch_seed(cfg.seed, i))
               for i, (c, d) in enumerate(zip(ids, data))}
    # one optimizer per client over (branch, bias, trunk replica); moments persist across rounds
    opts = {c: cfg.optimizer_state(cfg.lr) for c in ids}
    state = SyncState({})
    t0 = time.perf_counter()

    for rnd in range(cfg.rounds):
        def local(pair):
            cid, d = pair
            stream = streams[cid]
            n_local = cfg.sync_period * (stream.steps_per_epoch if cfg.sync_unit == "epochs" else 1)
            trunk = model.trunk.copy()
            c = model.client(cid)
            view = DeepOnet(c.branch, trunk, model.n_basis, model.n_outputs, c.bias,
                            model.use_bias, c.grid, model.query_shift, model.query_scale)
            n_un = len(c.branch.params()) + (1 if model.use_bias else 0)
            eta_c, eta = cfg.branch_lr(cid), cfg.lr
            opt = opts[cid]
            losses, work, seen = [], 0, 0
            for _ in range(n_local):
                idx = stream.next()
                r, cache = _residual(view, d, idx)
                loss = float(np.sum(r * r) / idx.size)
                if not np.isfinite(loss):
                    raise TrainingDiverged(opt.step, cid)
                g = backward_batch(view, cache, 2.0 * r / idx.size)
                params = view.branch.params() + ([view.bias] if model.use_bias else []) \
                    + trunk.params()
                grads = g.branch + ([g.bias] if model.use_bias else []) + g.trunk
                try:
                    if eta_c == eta:
                        new, _ = optimizer_step(params, grads, opt, cfg.scheduled(eta, rnd))
                    else:
                        new = _two_rate_step(params, grads, opt, n_un,
                                             cfg.scheduled(eta_c, rnd), cfg.scheduled(eta, rnd))
                except NonFiniteError:
                    raise TrainingDiverged(opt.step, cid) from None
                view.branch.set_params(new[: len(view.branch.params())])
                if model.use_bias:
                    view.bias = new[n_un - 1]
                trunk.set_params(new[n_un:])
                losses.append(loss)
                work += idx.size * sum(p.size for p in new)
                seen += idx.size
            return cid, view, trunk, losses, work, seen

        results = _map(local, list(zip(ids, data)), cfg.workers)
        # barrier: write back branches, then aggregate replicas
        replicas = {}
        total = 0.0
        for cid, view, trunk, losses, work, seen in results:
            model.set_unshared_params(cid, view.branch.params() + ([view.bias] if model.use_bias else []))
            replicas[cid] = trunk.params()
            metrics.client_loss[cid].extend(losses)
            metrics.updates[cid] += len(losses)
            metrics._bump(cid, work, seen)
            if losses:
                total += weights[cid] * losses[-1]
        state.replicas = replicas
        state.round = rnd + 1
        model.trunk.set_params(aggregate_trunk(replicas, weights))
        metrics.global_loss.append(total)
        log.debug("round %d: global batch loss %.4g", rnd + 1, total)

    metrics.wall_clock = time.perf_counter() - t0
    return model, metrics


def _two_rate_step(params, grads, opt: OptimizerState, split: int, eta_c: float, eta: float):
    # Adam/SGD are elementwise, so updating two slices with different rates is exact.
    # Both slices share the step counter; advance it once.
    head = OptimizerState(opt.kind, eta_c, opt.beta1, opt.beta2, opt.eps, opt.step,
                          None if opt.m is None else opt.m[:split],
                          None if opt.v is None else opt.v[:split])
    tail = OptimizerState(opt.kind, eta, opt.beta1, opt.beta2, opt.eps, opt.step,
                          None if opt.m is None else opt.m[split:],
                          None if opt.v is None else opt.v[split:])
    a, head = optimizer_step(params[:split], grads[:split], head)
    b, tail = optimizer_step(params[split:], grads[split:], tail)
    opt.step = head.step
    if opt.kind == "adam":
        opt.m = head.m + tail.m
        opt.v = head.v + tail.v
    return a + b


def train(model: D2noModel, datasets: Sequence[ClientDataset], cfg: TrainConfig):
    if cfg.mode == "lockstep":
        return train_lockstep(model, datasets, cfg)
    return train_periodic_sync(model, datasets, cfg)


def train_deeponet_baseline(model: DeepOnet, data: ClientDataset, cfg: TrainConfig):
    """Train one DeepONet on pooled data (all inputs on one shared sensor grid).

    The same schedule as D2NO is used with a single client: in periodic mode
    that is plain single-model training for rounds * sync_period updates.
    """
    if model.grid is not None and not model.grid.matches(data.grid):
        raise ValueError("pooled data must be resampled to the model's sensor grid")
    wrapped = D2noModel.from_deeponet(
        DeepOnet(model.branch, model.trunk, model.n_basis, model.n_outputs, model.bias,
                 model.use_bias, data.grid, model.query_shift, model.query_scale),
        data.client_id,
    )
    trained, metrics = train(wrapped, [data], cfg)
    return trained.view(data.client_id), metrics


# -- evaluation -------------------------------------------------------------


def predict(model: DeepOnet, inputs: np.ndarray, queries, chunk: int = 512) -> np.ndarray:
    inputs = np.atleast_2d(inputs)
    xs = as_queries(queries)
    parts = [forward_batch(model, inputs[i : i + chunk], xs)[0]
             for i in range(0, inputs.shape[0], chunk)]
    return np.concatenate(parts)


def l2_relative_errors(predictions, labels) -> np.ndarray:
    pred = np.asarray(predictions, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    if pred.shape != lab.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {lab.shape}")
    pred = pred.reshape(pred.shape[0], -1)
    lab = lab.reshape(lab.shape[0], -1)
    den = np.linalg.norm(lab, axis=1)
    zero = np.flatnonzero(den == 0)
    if zero.size:
        raise ValueError(f"label of sample {int(zero[0])} has zero norm")
    return np.linalg.norm(pred - lab, axis=1) / den


def l2_relative_error(predictions, labels) -> float:
    """Mean over samples of ||pred - label|| / ||label||, norms over all queries and components."""
    return float(np.mean(l2_relative_errors(predictions, labels)))


def evaluate(model: D2noModel | DeepOnet, data: ClientDataset, client_id=None) -> float:
    view = model.view(client_id or data.client_id) if isinstance(model, D2noModel) else model
    return l2_relative_error(predict(view, data.inputs, data.queries), data.labels)


# -- cost accounting --------------------------------------------------------


@dataclass
class WorkComparison:
    d2no: int
    baseline: int
    per_client: dict

    @property
    def holds(self) -> bool:
        return self.d2no <= self.baseline

    @property
    def strict(self) -> bool:
        return self.d2no < self.baseline

    @property
    def ratio(self) -> float:
        return self.d2no / self.baseline if self.baseline else math.inf


def gradient_work(d2no: Metrics, baseline: Metrics) -> WorkComparison:
    """Compare gradient-work counters of a D2NO run and a single-model run."""
    return WorkComparison(d2no.total_work, baseline.total_work, dict(d2no.work))


def closed_form_work(n_samples: int, n_params: int, n_epochs: int) -> int:
    return int(n_samples) * int(n_params) * int(n_epochs)
