"""Input-function families and sensor placement.

Every sampler is a pure function of (spec, seed). Sample ``i`` of a set is
drawn from its own generator seeded with ``(seed, i)``, so a sample does not
depend on how many others were drawn alongside it.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import linalg

from .operator import SensorGrid, TabulatedFunction


@dataclass
class FunctionSet:
    """``n`` functions tabulated on one shared fine grid; ``values`` is (n, M)."""

    grid: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape[1] != self.grid.size:
            raise ValueError("function values do not match the grid length")

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i) -> TabulatedFunction:
        return TabulatedFunction(self.grid, self.values[i])

    def subset(self, idx) -> "FunctionSet":
        return FunctionSet(self.grid, self.values[idx], dict(self.meta))


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


# -- Gaussian random fields -------------------------------------------------


def rbf_kernel(x1, x2, length_scale: float):
    """exp(-(x1 - x2)^2 / (2 l^2)); broadcasts over array arguments."""
    if not length_scale > 0:
        raise ValueError(f"length scale must be positive, got {length_scale}")
    d = np.subtract(x1, x2)
    return np.exp(-(d * d) / (2.0 * length_scale**2))


@dataclass(frozen=True)
class GrfSpec:
    length_scale: float
    domain: tuple[float, float] = (0.0, 1.0)
    resolution: int = 1000
    jitter: float | None = None  # None: start from 1e-10 * trace(K) / M

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ValueError("length scale must be positive")
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")
        if not self.domain[0] < self.domain[1]:
            raise ValueError("domain must satisfy a < b")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.domain[0], self.domain[1], self.resolution)


MAX_JITTER = 1e-6


@lru_cache(maxsize=16)
def grf_factor(spec: GrfSpec) -> np.ndarray:
    """Lower Cholesky factor of K + eps*I, escalating eps by 10x up to 1e-6."""
    x = spec.grid
    K = rbf_kernel(x[:, None], x[None, :], spec.length_scale)
    M = x.size
    eps = spec.jitter if spec.jitter is not None else 1e-10 * np.trace(K) / M
    while True:
        try:
            L = linalg.cholesky(K + eps * np.eye(M), lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                L.setflags(write=False)
                return L
        except linalg.LinAlgError:
            pass
        if eps >= MAX_JITTER:
            raise linalg.LinAlgError(
                f"Cholesky failed for RBF kernel with length scale {spec.length_scale} "
                f"on {M} points even with jitter {eps:.1e}"
            )
        eps = min(eps * 10 if eps > 0 else 1e-12, MAX_JITTER)


def grf_sample(spec: GrfSpec, n: int, seed: int, start: int = 0) -> FunctionSet:
    """``n`` mean-zero, unit-variance GRF draws on the fine grid (samples start..start+n-1)."""
    if n < 1:
        raise ValueError("need at least one sample")
    L = grf_factor(spec)
    M = spec.resolution
    Z = np.empty((n, M))
    for i in range(n):
        Z[i] = _rng(seed, start + i).standard_normal(M)
    return FunctionSet(spec.grid, Z @ L.T, {"family": "grf", **asdict(spec), "seed": seed})


def total_variation(fs: FunctionSet) -> np.ndarray:
    return np.abs(np.diff(fs.values, axis=1)).sum(axis=1)


# -- sharp peaks in clustered regions --------------------------------------


@dataclass(frozen=True)
class PeakFamilySpec:
    regions: tuple[tuple[float, float], ...] = ((0.6, 2.4), (3.9, 5.7))
    n_peaks: tuple[int, int] = (1, 2)  # inclusive range
    width: tuple[float, float] = (0.05, 0.15)
    amplitude: tuple[float, float] = (0.5, 1.5)
    random_sign: bool = True
    baseline: float = 0.0
    domain: tuple[float, float] = (0.0, 2 * np.pi)
    resolution: int = 1025

    def __post_init__(self):
        if self.width[0] <= 0 or self.width[1] < self.width[0]:
            raise ValueError("peak widths need 0 < sigma_min <= sigma_max")
        if self.n_peaks[0] < 0 or self.n_peaks[1] < self.n_peaks[0]:
            raise ValueError("invalid peak count range")
        regs = sorted(tuple(r) for r in self.regions)
        for (a, b), (c, _) in zip(regs[:-1], regs[1:]):
            if b >= c:
                raise ValueError("peak regions must be disjoint")
        for a, b in regs:
            if not (self.domain[0] <= a < b <= self.domain[1]):
                raise ValueError(f"region {(a, b)} is not inside the domain")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.domain[0], self.domain[1], self.resolution)


@dataclass
class PeakParameters:
    centers: np.ndarray
    widths: np.ndarray
    amplitudes: np.ndarray


def peak_parameters(spec: PeakFamilySpec, cluster_id: int, seed: int, index: int = 0):
    if not 0 <= cluster_id < len(spec.regions):
        raise ValueError(f"cluster {cluster_id} not in 0..{len(spec.regions) - 1}")
    rng = _rng(seed, index)
    lo, hi = spec.regions[cluster_id]
    k = int(rng.integers(spec.n_peaks[0], spec.n_peaks[1] + 1))
    centers = rng.uniform(lo, hi, k)
    widths = rng.uniform(spec.width[0], spec.width[1], k)
    amps = rng.uniform(spec.amplitude[0], spec.amplitude[1], k)
    if spec.random_sign:
        amps = amps * rng.choice([-1.0, 1.0], k)
    return PeakParameters(centers, widths, amps)


def bumps(x: np.ndarray, centers, widths, amplitudes) -> np.ndarray:
    x = np.asarray(x)[..., None]
    return (amplitudes * np.exp(-((x - centers) ** 2) / (2.0 * widths**2))).sum(axis=-1)


def peak_function_sample(
    spec: PeakFamilySpec, cluster_id: int, seed: int, index: int = 0
) -> TabulatedFunction:
    p = peak_parameters(spec, cluster_id, seed, index)
    x = spec.grid
    return TabulatedFunction(x, spec.baseline + bumps(x, p.centers, p.widths, p.amplitudes))


def peak_family_sample(spec: PeakFamilySpec, cluster_id: int, n: int, seed: int) -> FunctionSet:
    if n < 1:
        raise ValueError("need at least one sample")
    vals = np.stack([peak_function_sample(spec, cluster_id, seed, i).values for i in range(n)])
    meta = {"family": "peaks", "cluster_id": cluster_id, "seed": seed, **_jsonable(asdict(spec))}
    return FunctionSet(spec.grid, vals, meta)


# -- humps vs smooth --------------------------------------------------------


@dataclass(frozen=True)
class RegularityFamilySpec:
    kind: str = "smooth"  # "hump" or "smooth"
    # hump: a few narrow Gaussian bumps anywhere in the domain
    n_humps: tuple[int, int] = (1, 3)
    hump_width: tuple[float, float] = (0.08, 0.2)
    hump_amplitude: tuple[float, float] = (0.5, 1.5)
    # smooth: sum_{k=0..max_mode} (a_k cos kx + b_k sin kx), a_k, b_k ~ N(0, decay^(2k))
    max_mode: int = 2
    decay: float = 0.7
    domain: tuple[float, float] = (0.0, 2 * np.pi)
    resolution: int = 1025

    def __post_init__(self):
        if self.kind not in ("hump", "smooth"):
            raise ValueError(f"unknown family kind {self.kind!r}")
        if self.hump_width[0] <= 0:
            raise ValueError("hump widths must be positive")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.domain[0], self.domain[1], self.resolution)

    def wavelength_ratio(self) -> float:
        """Shortest smooth wavelength over the widest hump."""
        period = self.domain[1] - self.domain[0]
        return period / max(self.max_mode, 1) / self.hump_width[1]


def regularity_sample(spec: RegularityFamilySpec, n: int, seed: int) -> FunctionSet:
    if n < 1:
        raise ValueError("need at least one sample")
    x = spec.grid
    a, b = spec.domain
    out = np.empty((n, x.size))
    for i in range(n):
        rng = _rng(seed, i)
        if spec.kind == "hump":
            k = int(rng.integers(spec.n_humps[0], spec.n_humps[1] + 1))
            w = rng.uniform(*spec.hump_width, k)
            # keep humps clear of the ends so the function stays periodic
            c = rng.uniform(a + 4 * spec.hump_width[1], b - 4 * spec.hump_width[1], k)
            amp = rng.uniform(*spec.hump_amplitude, k) * rng.choice([-1.0, 1.0], k)
            out[i] = bumps(x, c, w, amp)
        else:
            theta = 2 * np.pi * (x - a) / (b - a)
            modes = np.arange(spec.max_mode + 1)
            scale = spec.decay**modes
            ca = rng.standard_normal(modes.size) * scale
            sb = rng.standard_normal(modes.size) * scale
            sb[0] = 0.0
            out[i] = np.cos(np.outer(theta, modes)) @ ca + np.sin(np.outer(theta, modes)) @ sb
    meta = {"family": spec.kind, "seed": seed, **_jsonable(asdict(spec))}
    return FunctionSet(x, out, meta)


# -- sensors ----------------------------------------------------------------


@dataclass(frozen=True)
class SensorPlacement:
    kind: str  # "uniform", "clustered" or "explicit"
    m: int = 0
    region: tuple[float, float] | None = None
    locations: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("uniform", "clustered", "explicit"):
            raise ValueError(f"unknown placement {self.kind!r}")
        if self.kind != "explicit" and self.m < 1:
            raise ValueError("need at least one sensor")
        if self.kind == "clustered" and self.region is None:
            raise ValueError("clustered placement needs a region")

    @classmethod
    def from_dict(cls, d: dict) -> "SensorPlacement":
        return cls(d["kind"], int(d.get("m", 0)),
                   tuple(d["region"]) if d.get("region") is not None else None,
                   tuple(d.get("locations", ())))


def place_sensors(placement: SensorPlacement, domain: tuple[float, float], name: str = "") -> SensorGrid:
    a, b = domain
    if placement.kind == "uniform":
        loc = np.linspace(a, b, placement.m)
    elif placement.kind == "clustered":
        lo, hi = placement.region
        if lo < a or hi > b or lo > hi:
            raise ValueError(f"cluster region {placement.region} not inside domain {domain}")
        loc = np.linspace(lo, hi, placement.m)
    else:
        loc = np.sort(np.asarray(placement.locations, dtype=np.float64))
        if loc.size == 0:
            raise ValueError("explicit placement needs locations")
        if loc[0] < a or loc[-1] > b:
            raise ValueError(f"explicit sensor locations fall outside domain {domain}")
    return SensorGrid(loc, name or f"{placement.kind}-{loc.size}")


# -- dataset files ----------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_matrix_csv(path, matrix: np.ndarray, header: list[str]) -> None:
    """Rows of float64 written with repr precision so that a reload is exact."""
    matrix = np.atleast_2d(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, np.array(rows, dtype=np.float64).reshape(len(rows), len(header))


def save_function_set(path, fs: FunctionSet) -> None:
    """CSV of function values (one row per function, columns = fine grid) + JSON manifest."""
    path = Path(path)
    write_matrix_csv(path, fs.values, [repr(float(x)) for x in fs.grid])
    manifest = {"rows": len(fs), "grid": fs.grid.tolist(), **_jsonable(fs.meta)}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_function_set(path) -> FunctionSet:
    path = Path(path)
    header, values = read_matrix_csv(path)
    meta = {}
    side = path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text())
        meta.pop("grid", None)
        meta.pop("rows", None)
    return FunctionSet(np.array([float(h) for h in header]), values, meta)
