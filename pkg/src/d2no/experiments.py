"""Experiment specs, dataset generation, replicated training, evaluation and reports.

An :class:`ExperimentSpec` fully determines the data (through its master seed)
and every training run: replication ``r`` initialises and shuffles with seed
``master_seed + r``. Methods are ``"d2no"`` plus the named single-model
baselines of the spec; a baseline sees every client's data resampled onto its
own uniform sensor grid.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .functions import (
    FunctionSet,
    GrfSpec,
    PeakFamilySpec,
    RegularityFamilySpec,
    SensorPlacement,
    _jsonable,
    grf_sample,
    load_function_set,
    peak_family_sample,
    place_sensors,
    read_matrix_csv,
    regularity_sample,
    save_function_set,
    write_matrix_csv,
)
from .nn import param_count
from .operator import D2noModel, SensorGrid, d2no_init, interp_rows, load_model, save_model
from .solvers import BurgersConfig, PendulumConfig, evaluate_labels
from .training import (
    ClientDataset,
    Metrics,
    TrainConfig,
    l2_relative_errors,
    merge_datasets,
    predict,
    train,
)

log = logging.getLogger(__name__)

EXPERIMENTS = ("burgers-peaks", "burgers-regularity", "pendulum-frequency", "pendulum-unbalanced")
REPORT_SCHEMA = "d2no-report/1"
CSV_SCHEMA = "d2no-csv/1"
TWO_PI = 2.0 * np.pi


class HashMismatch(RuntimeError):
    pass


# -- spec -------------------------------------------------------------------


@dataclass
class ClientSpec:
    client_id: str
    family: dict  # {"kind": "grf"|"peaks"|"hump"|"smooth", ...family parameters}
    sensors: dict  # SensorPlacement fields
    n_train: int
    n_test: int = 100
    branch_hidden: list = field(default_factory=lambda: [100, 100])


@dataclass
class BaselineSpec:
    name: str
    sensors: dict
    branch_hidden: list = field(default_factory=lambda: [100, 100])
    train: dict = field(default_factory=dict)  # overrides of the D2NO TrainConfig


@dataclass
class ExperimentSpec:
    experiment: str
    domain: tuple
    clients: list
    solver: dict  # {"kind": "burgers"|"pendulum", ...config fields}
    queries: dict  # {"n": 64, "endpoint": false} or {"points": [...]} or {"solver_times": true}
    model: dict  # trunk_hidden, n_basis, activation, stacked, use_bias, query_shift, query_scale
    train: dict  # TrainConfig fields (seed is set per replication)
    baselines: list = field(default_factory=list)
    replications: int = 10
    master_seed: int = 0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        self.domain = tuple(float(v) for v in self.domain)
        self.clients = [c if isinstance(c, ClientSpec) else ClientSpec(**c) for c in self.clients]
        self.baselines = [b if isinstance(b, BaselineSpec) else BaselineSpec(**b)
                          for b in self.baselines]
        if not self.clients:
            raise ValueError("an experiment needs at least one client")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        names = [b.name for b in self.baselines]
        if "d2no" in names or len(set(names)) != len(names):
            raise ValueError("baseline names must be unique and differ from 'd2no'")
        TrainConfig(**self.train)  # validate early

    @property
    def methods(self) -> list[str]:
        return ["d2no"] + [b.name for b in self.baselines]

    def baseline(self, name) -> BaselineSpec:
        for b in self.baselines:
            if b.name == name:
                return b
        raise KeyError(f"no baseline named {name!r}")

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(**copy.deepcopy(d))

    def replace(self, **changes) -> "ExperimentSpec":
        d = self.to_dict()
        d.update(changes)
        return ExperimentSpec.from_dict(d)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(_jsonable(obj), sort_keys=True).encode()).hexdigest()


def data_hash(spec: ExperimentSpec) -> str:
    """Hash of everything the datasets depend on."""
    return _digest({
        "experiment": spec.experiment,
        "domain": spec.domain,
        "solver": spec.solver,
        "queries": spec.queries,
        "master_seed": spec.master_seed,
        "clients": [{"id": c.client_id, "family": c.family, "n_train": c.n_train,
                     "n_test": c.n_test} for c in spec.clients],
    })


def config_hash(spec: ExperimentSpec) -> str:
    return _digest(spec.to_dict())


def load_spec(path) -> ExperimentSpec:
    return ExperimentSpec.from_dict(json.loads(Path(path).read_text()))


def save_spec(path, spec: ExperimentSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))


# -- built-in experiments ---------------------------------------------------


def _pendulum_spec(name: str, n1: int, n2: int, baselines: list) -> ExperimentSpec:
    grf = lambda ls: {"kind": "grf", "length_scale": ls, "resolution": 1000}  # noqa: E731
    return ExperimentSpec(
        experiment=name,
        domain=(0.0, 1.0),
        clients=[
            ClientSpec("V1", grf(0.1), {"kind": "uniform", "m": 100}, n1, 100, [100]),
            ClientSpec("V2", grf(1.0), {"kind": "uniform", "m": 10}, n2, 100, [100]),
        ],
        solver={"kind": "pendulum", "stiffness": 1.0, "dt": 1e-3, "n_out": 100},
        queries={"solver_times": True},
        model={"trunk_hidden": [100, 100], "n_basis": 50, "activation": "relu",
               "stacked": False, "use_bias": True, "query_shift": 0.5, "query_scale": 0.5},
        # 10 rounds of 100 local epochs: 1000 epochs per client, like the baselines
        train={"mode": "periodic_sync", "rounds": 10, "sync_period": 100,
               "sync_unit": "epochs", "batch_size": 64, "lr": 3e-4, "client_lr": 2e-3,
               "lr_decay": 0.7, "lr_decay_every": 1},
        baselines=baselines,
    )


def builtin_spec(name: str) -> ExperimentSpec:
    if name == "burgers-peaks":
        peaks = {"n_peaks": [1, 2], "width": [0.03, 0.08], "amplitude": [0.5, 1.5],
                 "random_sign": True}
        regions = PeakFamilySpec().regions
        clients = [
            ClientSpec(cid, {"kind": "peaks", "cluster": i, **peaks},
                       {"kind": "clustered", "m": 30, "region": list(regions[i])}, 500, 100)
            for i, cid in enumerate(("left", "right"))
        ]
        return ExperimentSpec(
            experiment=name,
            domain=(0.0, TWO_PI),
            clients=clients,
            solver={"kind": "burgers", "viscosity": 0.05, "n_grid": 256, "t_final": 1.0,
                    "dt": 1e-3},
            queries={"n": 64, "endpoint": False},
            model={"trunk_hidden": [100, 100], "n_basis": 50, "activation": "relu",
                   "stacked": False, "use_bias": True, "query_shift": np.pi, "query_scale": 1.0},
            train={"mode": "lockstep", "lockstep_order": "simultaneous", "iterations": 6000,
                   "batch_size": 50, "lr": 1e-3},
            # one pooled batch of 100 per step = the two client batches of 50
            baselines=[BaselineSpec("deeponet-uniform30", {"kind": "uniform", "m": 30},
                                    [100, 100], {"batch_size": 100})],
        )
    if name == "burgers-regularity":
        return ExperimentSpec(
            experiment=name,
            domain=(0.0, TWO_PI),
            clients=[
                ClientSpec("hump", {"kind": "hump"}, {"kind": "uniform", "m": 75}, 500, 100, [100]),
                ClientSpec("smooth", {"kind": "smooth"}, {"kind": "uniform", "m": 6}, 500, 100, [50]),
            ],
            solver={"kind": "burgers", "viscosity": 0.05, "n_grid": 256, "t_final": 1.0,
                    "dt": 1e-3},
            queries={"n": 64, "endpoint": False},
            model={"trunk_hidden": [100, 100], "n_basis": 10, "activation": "relu",
                   "stacked": True, "use_bias": True, "query_shift": np.pi, "query_scale": 1.0},
            train={"mode": "lockstep", "lockstep_order": "simultaneous", "iterations": 6000,
                   "batch_size": 50, "lr": 1e-3},
            baselines=[BaselineSpec("deeponet-uniform75", {"kind": "uniform", "m": 75},
                                    [100], {"batch_size": 100})],
        )
    if name == "pendulum-frequency":
        return _pendulum_spec(name, 1000, 1000, [
            BaselineSpec("deeponet-m100", {"kind": "uniform", "m": 100}, [100]),
            BaselineSpec("deeponet-m10", {"kind": "uniform", "m": 10}, [100]),
        ])
    if name == "pendulum-unbalanced":
        return _pendulum_spec(name, 200, 1800, [])
    raise ValueError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")


# -- data -------------------------------------------------------------------


def solver_config(spec: ExperimentSpec):
    cfg = dict(spec.solver)
    kind = cfg.pop("kind")
    if kind == "burgers":
        return BurgersConfig(**cfg)
    if kind == "pendulum":
        for k in ("horizon", "initial_state"):
            if k in cfg:
                cfg[k] = tuple(cfg[k])
        cfg.setdefault("horizon", spec.domain)
        return PendulumConfig(**cfg)
    raise ValueError(f"unknown solver {kind!r}")


def query_points(spec: ExperimentSpec) -> np.ndarray:
    q = spec.queries
    if "points" in q:
        return np.asarray(q["points"], dtype=np.float64)
    if q.get("solver_times"):
        return solver_config(spec).times
    a, b = spec.domain
    return np.linspace(a, b, int(q["n"]), endpoint=bool(q.get("endpoint", True)))


def _split_seed(spec: ExperimentSpec, client_index: int, split: str) -> int:
    ss = np.random.SeedSequence([spec.master_seed, client_index, 0 if split == "train" else 1])
    return int(ss.generate_state(1)[0])


def sample_family(family: dict, domain, n: int, seed: int) -> FunctionSet:
    fam = dict(family)
    kind = fam.pop("kind")
    tup = lambda d: {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}  # noqa: E731
    if kind == "grf":
        return grf_sample(GrfSpec(domain=tuple(domain), **fam), n, seed)
    if kind == "peaks":
        cluster = fam.pop("cluster")
        if "regions" in fam:
            fam["regions"] = tuple(tuple(r) for r in fam["regions"])
        return peak_family_sample(PeakFamilySpec(domain=tuple(domain), **tup(fam)), cluster, n, seed)
    if kind in ("hump", "smooth"):
        return regularity_sample(RegularityFamilySpec(kind=kind, domain=tuple(domain), **tup(fam)),
                                 n, seed)
    raise ValueError(f"unknown function family {kind!r}")


@dataclass
class ClientData:
    train_inputs: FunctionSet
    train_labels: np.ndarray  # (N, n_q, q)
    test_inputs: FunctionSet
    test_labels: np.ndarray


@dataclass
class DataBundle:
    spec_hash: str
    queries: np.ndarray
    clients: dict  # client_id -> ClientData
    files: dict = field(default_factory=dict)  # relative path -> sha256


def generate_data(spec: ExperimentSpec, out_dir=None) -> DataBundle:
    """Sample every client's train/test inputs and solve for labels."""
    cfg = solver_config(spec)
    queries = query_points(spec)
    clients = {}
    for i, c in enumerate(spec.clients):
        parts = {}
        for split, n in (("train", c.n_train), ("test", c.n_test)):
            fs = sample_family(c.family, spec.domain, n, _split_seed(spec, i, split))
            parts[split] = (fs, evaluate_labels(fs, cfg, queries))
            log.info("client %s: %d %s samples", c.client_id, n, split)
        clients[c.client_id] = ClientData(parts["train"][0], parts["train"][1],
                                          parts["test"][0], parts["test"][1])
    bundle = DataBundle(data_hash(spec), queries, clients)
    if out_dir is not None:
        write_data(spec, bundle, out_dir)
    return bundle


def _file_sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _label_header(queries, q) -> list[str]:
    return [f"{x!r}:{j}" for x in queries for j in range(q)]


def write_data(spec: ExperimentSpec, bundle: DataBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for cid, d in bundle.clients.items():
        cdir = out / cid
        cdir.mkdir(exist_ok=True)
        for split, fs, lab in (("train", d.train_inputs, d.train_labels),
                               ("test", d.test_inputs, d.test_labels)):
            fin, flab = cdir / f"{split}_inputs.csv", cdir / f"{split}_labels.csv"
            save_function_set(fin, fs)
            write_matrix_csv(flab, lab.reshape(lab.shape[0], -1),
                             _label_header(bundle.queries, lab.shape[2]))
            for p in (fin, fin.with_suffix(".json"), flab):
                files[str(p.relative_to(out))] = _file_sha(p)
    bundle.files = files
    manifest = {
        "schema": REPORT_SCHEMA,
        "experiment": spec.experiment,
        "data_hash": bundle.spec_hash,
        "spec": spec.to_dict(),
        "queries": bundle.queries.tolist(),
        "n_outputs": next(iter(bundle.clients.values())).train_labels.shape[2],
        "files": files,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_data(spec: ExperimentSpec, data_dir) -> DataBundle:
    """Read a dataset directory, refusing data generated from a different spec."""
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath} not found; run gen-data first")
    manifest = json.loads(mpath.read_text())
    expect = data_hash(spec)
    if manifest.get("data_hash") != expect:
        raise HashMismatch(
            f"dataset in {root} was generated for data hash {manifest.get('data_hash')}, "
            f"spec needs {expect}; regenerate with gen-data"
        )
    for rel, sha in manifest["files"].items():
        if _file_sha(root / rel) != sha:
            raise HashMismatch(f"{root / rel} does not match its recorded hash")
    queries = np.asarray(manifest["queries"], dtype=np.float64)
    q = int(manifest["n_outputs"])
    clients = {}
    for c in spec.clients:
        cdir = root / c.client_id
        parts = []
        for split in ("train", "test"):
            fs = load_function_set(cdir / f"{split}_inputs.csv")
            _, lab = read_matrix_csv(cdir / f"{split}_labels.csv")
            parts += [fs, lab.reshape(lab.shape[0], queries.size, q)]
        clients[c.client_id] = ClientData(*parts)
    return DataBundle(expect, queries, clients, dict(manifest["files"]))


def client_grid(spec: ExperimentSpec, method: str, client_id=None) -> SensorGrid:
    if method == "d2no":
        c = next(c for c in spec.clients if c.client_id == client_id)
        return place_sensors(SensorPlacement.from_dict(c.sensors), spec.domain, c.client_id)
    b = spec.baseline(method)
    return place_sensors(SensorPlacement.from_dict(b.sensors), spec.domain, method)


def datasets_for(spec: ExperimentSpec, bundle: DataBundle, method: str, split: str = "train"):
    """Per-client datasets discretized on the grids ``method`` uses."""
    out = []
    for c in spec.clients:
        d = bundle.clients[c.client_id]
        fs, lab = (d.train_inputs, d.train_labels) if split == "train" else (d.test_inputs, d.test_labels)
        grid = client_grid(spec, method, c.client_id)
        u = interp_rows(fs.grid, fs.values, grid.locations)
        out.append(ClientDataset(c.client_id, grid, u, bundle.queries, lab))
    return out


# -- training ---------------------------------------------------------------


def build_model(spec: ExperimentSpec, method: str, seed: int, n_outputs: int) -> D2noModel:
    m = spec.model
    trunk = [1] + list(m.get("trunk_hidden", [100, 100])) + [m["n_basis"] * n_outputs]
    kw = dict(n_outputs=n_outputs, seed=seed, stacked=m.get("stacked", False),
              activation=m.get("activation", "tanh"), use_bias=m.get("use_bias", True),
              query_shift=m.get("query_shift", 0.0), query_scale=m.get("query_scale", 1.0))
    if method == "d2no":
        grids = {c.client_id: client_grid(spec, method, c.client_id) for c in spec.clients}
        hidden = {c.client_id: list(c.branch_hidden) for c in spec.clients}
        return d2no_init(grids, hidden, trunk, m["n_basis"], **kw)
    b = spec.baseline(method)
    return d2no_init({method: client_grid(spec, method)}, list(b.branch_hidden), trunk,
                     m["n_basis"], **kw)


def train_config(spec: ExperimentSpec, method: str, seed: int, mode: str | None = None) -> TrainConfig:
    d = dict(spec.train)
    if method != "d2no":
        d.update(spec.baseline(method).train)
    if mode is not None:
        d["mode"] = {"periodic": "periodic_sync"}.get(mode, mode)
    d["seed"] = seed
    d.setdefault("workers", _threads())
    return TrainConfig(**d)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("D2NO_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class RunResult:
    method: str
    replication: int
    seed: int
    model: D2noModel
    metrics: Metrics
    config: TrainConfig


def run_method(spec: ExperimentSpec, bundle: DataBundle, method: str, replication: int,
               mode: str | None = None) -> RunResult:
    seed = spec.master_seed + replication
    data = datasets_for(spec, bundle, method, "train")
    if method != "d2no":
        data = [merge_datasets(data, method)]
    model = build_model(spec, method, seed, data[0].n_outputs)
    cfg = train_config(spec, method, seed, mode)
    trained, metrics = train(model, data, cfg)
    return RunResult(method, replication, seed, trained, metrics, cfg)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_log(path, metrics: Metrics) -> None:
    """One row per update step of each client (periodic) or per iteration (lockstep)."""
    ids = list(metrics.client_loss)
    n = max(len(v) for v in metrics.client_loss.values()) if ids else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"loss_{c}" for c in ids] + ["global_loss"])
        for i in range(n):
            row = [i]
            for c in ids:
                h = metrics.client_loss[c]
                row.append(repr(h[i]) if i < len(h) else "")
            g = metrics.global_loss
            # periodic runs record one global value per round; leave gaps elsewhere
            row.append(repr(g[i]) if len(g) == n and i < len(g) else "")
            w.writerow(row)


def save_run(out_dir, spec: ExperimentSpec, bundle: DataBundle, res: RunResult) -> Path:
    """Checkpoint + log + manifest; the manifest is written last and marks the run complete."""
    rdir = Path(out_dir) / res.method / f"rep{res.replication:03d}"
    rdir.mkdir(parents=True, exist_ok=True)
    done = rdir / "run.json"
    if done.exists():
        done.unlink()
    ckpt = rdir / "model.ckpt"
    save_model(ckpt, res.model, {"method": res.method, "replication": res.replication})
    write_log(rdir / "log.csv", res.metrics)
    manifest = {
        "schema": REPORT_SCHEMA,
        "experiment": spec.experiment,
        "method": res.method,
        "replication": res.replication,
        "seed": res.seed,
        "config": res.config.to_dict(),
        "config_hash": config_hash(spec),
        "data_hash": bundle.spec_hash,
        "checkpoint": ckpt.name,
        "metrics": {k: v for k, v in res.metrics.to_dict().items()
                    if k not in ("client_loss", "global_loss")},
        "complete": True,
    }
    _atomic_write(done, json.dumps(_jsonable(manifest), indent=2, sort_keys=True))
    return rdir


def train_all(spec: ExperimentSpec, bundle: DataBundle, out_dir, methods=None,
              replications: int | None = None, mode: str | None = None) -> list[Path]:
    methods = methods or spec.methods
    reps = spec.replications if replications is None else replications
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_spec(out / "spec.json", spec)
    paths = []
    for method in methods:
        for r in range(reps):
            t0 = time.perf_counter()
            res = run_method(spec, bundle, method, r, mode)
            paths.append(save_run(out, spec, bundle, res))
            log.info("%s rep %d trained in %.1fs", method, r, time.perf_counter() - t0)
    return paths


# -- evaluation -------------------------------------------------------------


@dataclass
class RunReport:
    experiment: str
    method: str
    clients: list
    errors: list  # per replication: {client_id: mean L2-relative error}
    shared_params: int
    unshared_params: int
    unshared_per_client: dict
    work: list  # per replication total gradient work
    config_hash: str
    data_hash: str
    split: str = "test"
    reference_error: float | None = None  # mean-of-training-labels predictor
    extra: dict = field(default_factory=dict)
    schema: str = REPORT_SCHEMA

    @property
    def replications(self) -> int:
        return len(self.errors)

    def client_errors(self, client_id) -> np.ndarray:
        return np.array([e[client_id] for e in self.errors])

    def mean(self, client_id=None) -> float:
        if client_id is None:
            return float(np.mean([self.mean(c) for c in self.clients]))
        return float(np.mean(self.client_errors(client_id)))

    def std(self, client_id=None) -> float:
        if client_id is None:
            per_rep = [np.mean([e[c] for c in self.clients]) for e in self.errors]
            return float(np.std(per_rep))
        return float(np.std(self.client_errors(client_id)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = {
            "mean": self.mean(),
            "std": self.std(),
            **{f"mean_{c}": self.mean(c) for c in self.clients},
            **{f"std_{c}": self.std(c) for c in self.clients},
        }
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        d.pop("summary", None)
        if d.get("schema", REPORT_SCHEMA) != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(**d)


def parameter_counts(model: D2noModel) -> tuple[int, int, dict]:
    per = {}
    for cid in model.client_ids:
        per[cid] = int(sum(p.size for p in model.unshared_params(cid)))
    return param_count(model.trunk), int(sum(per.values())), per


def mean_label_error(bundle: DataBundle, split: str = "test") -> float:
    """Error of predicting the pooled mean training label for every sample."""
    train_labels = np.concatenate([d.train_labels for d in bundle.clients.values()])
    mean = train_labels.mean(axis=0)
    errs = []
    for d in bundle.clients.values():
        lab = d.test_labels if split == "test" else d.train_labels
        errs.append(l2_relative_errors(np.broadcast_to(mean, lab.shape), lab))
    return float(np.mean(np.concatenate(errs)))


def model_errors(spec: ExperimentSpec, bundle: DataBundle, method: str, model: D2noModel,
                 split: str = "test") -> dict:
    out = {}
    for d in datasets_for(spec, bundle, method, split):
        cid = d.client_id
        if method == "d2no":
            view = model.view(cid)
        else:
            view = model.view(model.client_ids[0])
        if not view.grid.matches(d.grid):
            raise ValueError(f"checkpoint sensors for {cid!r} do not match the data grid")
        out[cid] = float(np.mean(l2_relative_errors(predict(view, d.inputs, d.queries), d.labels)))
    return out


def report_from_results(spec: ExperimentSpec, bundle: DataBundle, results: Sequence[RunResult],
                        split: str = "test") -> RunReport:
    method = results[0].method
    errors = [model_errors(spec, bundle, method, r.model, split) for r in results]
    shared, unshared, per = parameter_counts(results[0].model)
    return RunReport(spec.experiment, method, [c.client_id for c in spec.clients], errors,
                     shared, unshared, per, [r.metrics.total_work for r in results],
                     config_hash(spec), bundle.spec_hash, split, mean_label_error(bundle, split))


def _to_d2no(model) -> D2noModel:
    return model if isinstance(model, D2noModel) else D2noModel.from_deeponet(model, "all")


def evaluate_runs(spec: ExperimentSpec, bundle: DataBundle, runs_dir, split: str = "test",
                  out_dir=None) -> list[RunReport]:
    """One :class:`RunReport` per method found under ``runs_dir``."""
    root = Path(runs_dir)
    reports = []
    for method in spec.methods:
        mdir = root / method
        if not mdir.is_dir():
            continue
        errors, work, counts, logs = [], [], None, []
        chash = None
        for rdir in sorted(p for p in mdir.iterdir() if p.is_dir()):
            done = rdir / "run.json"
            if not done.exists():
                log.warning("skipping incomplete run %s", rdir)
                continue
            meta = json.loads(done.read_text())
            if meta["data_hash"] != bundle.spec_hash:
                raise HashMismatch(f"{rdir} was trained on data {meta['data_hash']}, "
                                   f"evaluation data is {bundle.spec_hash}")
            chash = meta["config_hash"]
            model = _to_d2no(load_model(rdir / meta["checkpoint"])[0])
            errors.append(model_errors(spec, bundle, method, model, split))
            work.append(int(meta["metrics"]["total_work"]))
            counts = counts or parameter_counts(model)
            logs.append(str(rdir / "log.csv"))
        if not errors:
            continue
        rep = RunReport(spec.experiment, method, [c.client_id for c in spec.clients], errors,
                        counts[0], counts[1], counts[2], work, chash or config_hash(spec),
                        bundle.spec_hash, split, mean_label_error(bundle, split),
                        {"logs": logs})
        if out_dir is not None:
            write_report(Path(out_dir) / f"report_{method}.json", rep)
            write_prediction_samples(Path(out_dir) / f"predictions_{method}.csv", spec, bundle,
                                     method, _to_d2no(load_model(Path(logs[0]).parent / "model.ckpt")[0]))
        reports.append(rep)
    if not reports:
        raise FileNotFoundError(f"no completed runs under {root}")
    return reports


def write_report(path, report: RunReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, json.dumps(report.to_dict(), indent=2, sort_keys=True))


def read_report(path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text()))


def write_prediction_samples(path, spec, bundle, method, model, n_samples: int = 3) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["method", "client", "sample", "query", "component", "prediction", "label"])
        for d in datasets_for(spec, bundle, method, "test"):
            view = model.view(d.client_id if method == "d2no" else model.client_ids[0])
            k = min(n_samples, len(d))
            pred = predict(view, d.inputs[:k], d.queries)
            for i in range(k):
                for j, x in enumerate(d.queries[:, 0]):
                    for c in range(d.n_outputs):
                        w.writerow([method, d.client_id, i, repr(float(x)), c,
                                    repr(float(pred[i, j, c])), repr(float(d.labels[i, j, c]))])


# -- comparison -------------------------------------------------------------


def compare_reports(reports: Sequence[RunReport], out_dir=None) -> str:
    """Method-by-metric table; with a D2NO report present, ratio columns D2NO / baseline."""
    if not reports:
        raise ValueError("nothing to compare")
    exp = {r.experiment for r in reports}
    if len(exp) != 1:
        raise ValueError(f"reports come from different experiments: {sorted(exp)}")
    clients = reports[0].clients
    metrics = ["mean_error", "std_error"] + [f"error_{c}" for c in clients] \
        + ["unshared_params", "shared_params", "gradient_work", "replications"]

    def value(r: RunReport, m: str) -> float:
        if m == "mean_error":
            return r.mean()
        if m == "std_error":
            return r.std()
        if m.startswith("error_"):
            return r.mean(m[len("error_"):])
        if m == "unshared_params":
            return r.unshared_params
        if m == "shared_params":
            return r.shared_params
        if m == "gradient_work":
            return float(np.mean(r.work))
        return r.replications

    methods = [r.method for r in reports]
    cols = list(methods)
    d2no = next((r for r in reports if r.method == "d2no"), None)
    ratios = [r for r in reports if d2no is not None and r is not d2no]
    cols += [f"ratio_d2no/{r.method}" for r in ratios]
    rows = []
    for m in metrics:
        row = [value(r, m) for r in reports]
        for r in ratios:
            den = value(r, m)
            row.append(value(d2no, m) / den if den else math.nan)
        rows.append(row)

    width = max(14, *(len(c) for c in cols))
    lines = [f"experiment: {reports[0].experiment}",
             "metric".ljust(18) + "".join(c.rjust(width + 2) for c in cols)]
    for m, row in zip(metrics, rows):
        cells = []
        for v in row:
            cells.append((f"{v:.6g}" if isinstance(v, float) else str(v)).rjust(width + 2))
        lines.append(m.ljust(18) + "".join(cells))
    if reports[0].reference_error is not None:
        lines.append(f"mean-of-labels reference error: {reports[0].reference_error:.6g}")
    text = "\n".join(lines) + "\n"

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.txt").write_text(text)
        with open(out / "compare.csv", "w", newline="") as fh:
            fh.write(f"# {CSV_SCHEMA}\n")
            w = csv.writer(fh)
            w.writerow(["metric"] + cols)
            for m, row in zip(metrics, rows):
                w.writerow([m] + [repr(float(v)) for v in row])
        _write_loss_curves(out / "loss_curves.csv", reports)
    return text


def _write_loss_curves(path, reports: Sequence[RunReport]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["method", "replication", "client", "step", "loss"])
        for r in reports:
            for rep, lp in enumerate(r.extra.get("logs", [])):
                if not Path(lp).exists():
                    continue
                with open(lp, newline="") as lf:
                    rows = csv.reader(lf)
                    header = next(rows)
                    names = [h[len("loss_"):] for h in header[1:-1]]
                    for row in rows:
                        for name, v in zip(names, row[1:-1]):
                            if v:
                                w.writerow([r.method, rep, name, row[0], v])
