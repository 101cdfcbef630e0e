"""Label generators: periodic viscous Burgers and the forced nonlinear pendulum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .functions import FunctionSet
from .operator import TabulatedFunction, interp_rows

TWO_PI = 2.0 * np.pi


class SolverError(RuntimeError):
    pass


# -- Burgers ----------------------------------------------------------------


@dataclass(frozen=True)
class BurgersConfig:
    """u_t + (u^2/2)_x = viscosity * u_xx on the periodic interval [0, 2 pi)."""

    viscosity: float = 0.05
    n_grid: int = 256
    t_final: float = 1.0
    dt: float = 1e-4
    convection: bool = True
    blowup_factor: float = 1e3
    # explicit RK4 is stable for |lambda * dt| below ~2.78; keep a margin
    stability_limit: float = 2.5

    def __post_init__(self):
        if not self.viscosity > 0:
            raise ValueError("viscosity must be positive")
        if self.n_grid < 64 or self.n_grid & (self.n_grid - 1):
            raise ValueError("n_grid must be a power of two >= 64")
        if not (self.dt > 0 and self.t_final >= 0):
            raise ValueError("need dt > 0 and t_final >= 0")
        kmax = self.n_grid // 3
        if self.viscosity * kmax**2 * self.dt > self.stability_limit:
            raise ValueError(
                f"dt={self.dt} violates the diffusive stability bound "
                f"dt <= {self.stability_limit / (self.viscosity * kmax**2):.3g}"
            )

    @property
    def grid(self) -> np.ndarray:
        return TWO_PI * np.arange(self.n_grid) / self.n_grid


@dataclass
class FieldSnapshot:
    grid: np.ndarray  # periodic nodes 2 pi j / N, j < N
    values: np.ndarray  # (N,) or (n, N)
    time: float

    def at(self, x) -> np.ndarray:
        """Periodic linear interpolation at arbitrary points."""
        x = np.mod(np.asarray(x, dtype=np.float64), TWO_PI)
        nodes = np.append(self.grid, TWO_PI)
        vals = np.atleast_2d(self.values)
        vals = np.concatenate([vals, vals[:, :1]], axis=1)
        out = interp_rows(nodes, vals, x)
        return out[0] if np.ndim(self.values) == 1 else out


def solve_burgers(u0, cfg: BurgersConfig = BurgersConfig()) -> FieldSnapshot:
    """Pseudo-spectral in space (2/3-rule dealiased flux), classical RK4 in time.

    ``u0`` holds values on ``cfg.grid``; a 2-D array solves a batch of initial
    conditions at once.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.shape[-1] != cfg.n_grid:
        raise ValueError(f"u0 has {u0.shape[-1]} points, config expects {cfg.n_grid}")
    if not np.all(np.isfinite(u0)):
        raise ValueError("u0 must be finite")
    N = cfg.n_grid
    k = np.arange(N // 2 + 1, dtype=np.float64)
    ik = 1j * k
    ik[-1] = 0.0  # Nyquist mode has no odd derivative on an even grid
    flux_op = -0.5 * ik * (k < N / 3.0)
    lin = -cfg.viscosity * k * k

    def rhs(uh):
        out = lin * uh
        if cfg.convection:
            u = np.fft.irfft(uh, n=N)
            out = out + flux_op * np.fft.rfft(u * u)
        return out

    n_steps = int(math.ceil(cfg.t_final / cfg.dt - 1e-9))
    h = cfg.t_final / n_steps if n_steps else 0.0
    uh = np.fft.rfft(u0)
    limit = cfg.blowup_factor * max(float(np.abs(u0).max()), np.finfo(float).tiny)
    with np.errstate(over="ignore", invalid="ignore"):
        uh = _rk4_loop(rhs, uh, h, n_steps, N, limit, u0)
    return FieldSnapshot(cfg.grid, np.fft.irfft(uh, n=N), cfg.t_final)


def _rk4_loop(rhs, uh, h, n_steps, N, limit, u0):
    # overflow is expected on a blow-up; it is detected and reported below
    for step in range(n_steps):
        k1 = rhs(uh)
        k2 = rhs(uh + 0.5 * h * k1)
        k3 = rhs(uh + 0.5 * h * k2)
        k4 = rhs(uh + h * k3)
        uh = uh + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if step % 50 == 49 or step == n_steps - 1:
            peak = np.abs(np.fft.irfft(uh, n=N)).max()
            if not np.isfinite(peak) or peak > limit:
                umax = float(np.abs(u0).max())
                raise SolverError(
                    f"Burgers solution blew up at t={(step + 1) * h:.4g} "
                    f"(max|u|={peak:.3g}); reduce dt below ~{1.0 / (umax * N / 3.0 + 1e-300):.2g} "
                    f"(convective CFL) or increase n_grid"
                )
    return uh


# -- pendulum ---------------------------------------------------------------


@dataclass(frozen=True)
class PendulumConfig:
    """s1' = s2, s2' = -k sin(s1) + u(t)."""

    stiffness: float = 1.0
    horizon: tuple[float, float] = (0.0, 1.0)
    dt: float = 1e-3
    initial_state: tuple[float, float] = (0.0, 0.0)
    n_out: int = 100

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon[0] < self.horizon[1]:
            raise ValueError("empty horizon")
        if self.n_out < 2:
            raise ValueError("need at least two output times")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.horizon[0], self.horizon[1], self.n_out)

    def n_steps(self) -> int:
        # rounded up to a multiple of the output spacing so every output time is a step node
        seg = self.n_out - 1
        span = self.horizon[1] - self.horizon[0]
        return seg * int(math.ceil(span / self.dt / seg - 1e-9))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_out, 2) or (n, n_out, 2)


def solve_pendulum(control, cfg: PendulumConfig = PendulumConfig()) -> Trajectory:
    """Classical RK4 with the control linearly interpolated at the stage times.

    Steps of size ~``cfg.dt`` are split at the control's tabulation nodes, so
    each step integrates a smooth forcing and fourth-order accuracy holds.
    """
    if isinstance(control, (TabulatedFunction, FunctionSet)):
        nodes, raw = control.grid, control.values
    else:
        nodes, raw = control
    single = np.ndim(raw) == 1
    nodes = np.asarray(nodes, dtype=np.float64)
    vals = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    t0, t1 = cfg.horizon
    tol = 1e-12 * max(1.0, abs(t0), abs(t1))
    if nodes[0] > t0 + tol or nodes[-1] < t1 - tol:
        raise SolverError(
            f"control tabulated on [{nodes[0]:.6g}, {nodes[-1]:.6g}] does not cover "
            f"the horizon [{t0}, {t1}]"
        )
    if not np.all(np.isfinite(vals)):
        raise SolverError("control tabulation contains non-finite values")

    steps, slot = _step_nodes(cfg, nodes)
    h = np.diff(steps)
    mids = steps[:-1] + 0.5 * h
    U = interp_rows(nodes, vals, steps)  # (n, n_nodes)
    Um = interp_rows(nodes, vals, mids)
    k = cfg.stiffness
    n = vals.shape[0]
    s1 = np.full(n, float(cfg.initial_state[0]))
    s2 = np.full(n, float(cfg.initial_state[1]))
    out = np.empty((n, cfg.n_out, 2))
    out[:, 0, 0], out[:, 0, 1] = s1, s2
    for i in range(h.size):
        hi = h[i]
        ua, um, ub = U[:, i], Um[:, i], U[:, i + 1]
        a1, b1 = s2, -k * np.sin(s1) + ua
        a2, b2 = s2 + 0.5 * hi * b1, -k * np.sin(s1 + 0.5 * hi * a1) + um
        a3, b3 = s2 + 0.5 * hi * b2, -k * np.sin(s1 + 0.5 * hi * a2) + um
        a4, b4 = s2 + hi * b3, -k * np.sin(s1 + hi * a3) + ub
        s1 = s1 + (hi / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        s2 = s2 + (hi / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        j = slot[i + 1]
        if j >= 0:
            out[:, j, 0], out[:, j, 1] = s1, s2
    return Trajectory(cfg.times, out[0] if single else out)


def _step_nodes(cfg: PendulumConfig, control_nodes: np.ndarray):
    """Uniform RK4 nodes plus every interior control node.

    The linearly interpolated control has a kink at each tabulation node;
    stepping across one costs RK4 its order, so the kinks become step
    boundaries. ``slot[i]`` is the output index stored at node i, or -1.
    """
    t0, t1 = cfg.horizon
    n_steps = cfg.n_steps()
    h = (t1 - t0) / n_steps
    uniform = t0 + h * np.arange(n_steps + 1)
    uniform[-1] = t1
    stride = n_steps // (cfg.n_out - 1)
    slot_u = np.full(n_steps + 1, -1)
    slot_u[::stride] = np.arange(cfg.n_out)
    inner = control_nodes[(control_nodes > t0) & (control_nodes < t1)]
    # drop control nodes that (nearly) coincide with a uniform node
    near = np.abs(inner - (t0 + h * np.rint((inner - t0) / h))) <= 1e-9 * h
    inner = inner[~near]
    times = np.concatenate([uniform, inner])
    slot = np.concatenate([slot_u, np.full(inner.size, -1)])
    order = np.argsort(times, kind="stable")
    return times[order], slot[order]


def pendulum_energy(states: np.ndarray, stiffness: float = 1.0) -> np.ndarray:
    s1, s2 = states[..., 0], states[..., 1]
    return 0.5 * s2 * s2 + stiffness * (1.0 - np.cos(s1))


# -- labels -----------------------------------------------------------------


def evaluate_labels(inputs: FunctionSet, cfg, queries) -> np.ndarray:
    """Solver outputs at the query points, shape (n_functions, n_queries, q)."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1)
    if isinstance(cfg, BurgersConfig):
        u0 = interp_rows(inputs.grid, inputs.values, cfg.grid)
        snap = solve_burgers(u0, cfg)
        return np.atleast_2d(snap.at(queries))[:, :, None]
    if isinstance(cfg, PendulumConfig):
        traj = solve_pendulum(inputs, cfg)
        states = traj.states if traj.states.ndim == 3 else traj.states[None]
        s1 = interp_rows(traj.times, states[:, :, 0], queries)
        s2 = interp_rows(traj.times, states[:, :, 1], queries)
        return np.stack([s1, s2], axis=-1)
    raise TypeError(f"unsupported solver config {type(cfg).__name__}")
