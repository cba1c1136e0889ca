"""Euler-Maruyama simulation of base, pinned, and score-driven processes.

Noise is drawn from counter-based Philox streams keyed by (seed, purpose,
step), one block of shape (S, k) per step; path s always reads row s, so
paths are independent streams and a batch is bit-reproducible for a given
seed regardless of how the work is scheduled.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DivergedPath, DomainError
from .grids import TimeGrid
from .bridge import BridgeSpec, jittered_cholesky

# Domain tags separating Philox key spaces of different consumers.
_TAG_SIM = 0x5DE0
_TAG_EXACT = 0xE8AC
_TAG_DATA = 0xDA7A


def counter_rng(seed: int, tag: int, block: int) -> np.random.Generator:
    """Generator positioned at an independent (seed, tag, block) stream."""
    bg = np.random.Philox(key=(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) << np.uint64(0))
                          + (np.uint64(tag) << np.uint64(64)),
                          counter=[0, 0, np.uint64(block), 0])
    return np.random.Generator(bg)


def _step_noise(seed: int, step: int, shape) -> np.ndarray:
    return counter_rng(seed, _TAG_SIM, step).standard_normal(shape)


@dataclass
class DriftField:
    """Batched drift evaluator ``(t, states, pins) -> drift`` plus metadata.

    ``pins`` carries the per-path conditioning endpoint (or None); the
    evaluator must be pure so simulations can share it across workers.
    """

    evaluator: Callable[[float, np.ndarray, np.ndarray | None], np.ndarray]
    direction: str = "forward"
    name: str = "drift"

    def __call__(self, t, x, pin=None):
        return self.evaluator(t, x, pin)


@dataclass
class TrajectoryBatch:
    """Simulated paths stored at the saved grid times.

    ``paths`` has shape (S, n_saved, k); ``times`` are the matching grid
    times in simulation order (descending for reverse runs).
    """

    grid: TimeGrid
    times: np.ndarray
    paths: np.ndarray
    direction: str
    seed: int

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    def state_at(self, t: float) -> np.ndarray:
        idx = np.nonzero(np.isclose(self.times, t, atol=1e-9))[0]
        if idx.size == 0:
            raise DomainError(f"t={t} was not saved (times {self.times})")
        return self.paths[:, idx[0], :]

    @property
    def terminal(self) -> np.ndarray:
        return self.paths[:, -1, :]

    def to_csv(self, path) -> None:
        """One row per (path, saved time)."""
        k = self.dim
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "t"] + [f"x{i}" for i in range(k)])
            for s in range(self.n_paths):
                for j, t in enumerate(self.times):
                    writer.writerow([s, f"{t:.12g}"] + [f"{v:.17g}" for v in self.paths[s, j]])

    def to_binary(self, path) -> None:
        """Header: int64 (S, n_saved, k, seed) + float64 times; body row-major states."""
        with open(path, "wb") as fh:
            hdr = np.array([self.n_paths, self.times.shape[0], self.dim, self.seed],
                           dtype="<i8")
            fh.write(hdr.tobytes())
            fh.write(np.asarray(self.times, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.paths, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path, grid: TimeGrid | None = None) -> "TrajectoryBatch":
        with open(path, "rb") as fh:
            S, n_saved, k, seed = np.frombuffer(fh.read(32), dtype="<i8")
            times = np.frombuffer(fh.read(8 * int(n_saved)), dtype="<f8").copy()
            body = np.frombuffer(fh.read(8 * int(S * n_saved * k)), dtype="<f8")
        paths = body.reshape(int(S), int(n_saved), int(k)).copy()
        direction = "forward" if times[0] <= times[-1] else "reverse"
        if grid is None:
            lo, hi = min(times[0], times[-1]), max(times[0], times[-1])
            grid = TimeGrid(lo, hi, max(1, len(times) - 1))
        return cls(grid=grid, times=times, paths=paths, direction=direction, seed=int(seed))


def _kappa_factors(schedule, times) -> np.ndarray:
    """Cholesky factor of kappa at every node (zeros when kappa vanishes)."""
    facs = []
    for t in times:
        kap = np.asarray(schedule.kappa(t), dtype=float)
        chol, _ = jittered_cholesky(kap) if kap.any() else (None, 0.0)
        facs.append(np.zeros_like(kap) if chol is None else chol)
    return np.stack(facs)


def _check_finite(X, step):
    bad = ~np.isfinite(X).all(axis=1)
    if bad.any():
        raise DivergedPath(int(np.nonzero(bad)[0][0]), step)


def _save_indices(grid: TimeGrid, save_times) -> np.ndarray:
    if save_times is None:
        return np.arange(grid.n_steps + 1)
    return np.array(sorted(grid.index_of(t) for t in save_times), dtype=int)


def simulate_forward(drift: DriftField, schedule, x0_batch, grid: TimeGrid,
                     seed: int, save_times=None, pin=None) -> TrajectoryBatch:
    """Euler-Maruyama from grid start to grid end.

    x_{j+1} = x_j + drift(t_j, x_j) dt + chol(kappa(t_j)) sqrt(dt) xi_j.
    """
    X = np.array(np.atleast_2d(np.asarray(x0_batch, dtype=float)), copy=True)
    S, k = X.shape
    dt, times = grid.dt, grid.times
    sqdt = np.sqrt(dt)
    chols = _kappa_factors(schedule, times)
    save = _save_indices(grid, save_times)
    out = np.empty((S, save.size, k))
    pos = 0
    if save[0] == 0:
        out[:, 0] = X
        pos = 1
    for j in range(grid.n_steps):
        t = times[j]
        X = X + drift(t, X, pin) * dt
        L = chols[j]
        if L.any():
            X = X + sqdt * (_step_noise(seed, j, (S, k)) @ L.T)
        _check_finite(X, j)
        if pos < save.size and save[pos] == j + 1:
            out[:, pos] = X
            pos += 1
    return TrajectoryBatch(grid=grid, times=times[save], paths=out,
                           direction="forward", seed=seed)


def simulate_reverse(drift: DriftField, schedule, x1_batch, grid: TimeGrid,
                     seed: int, save_times=None, pin=None) -> TrajectoryBatch:
    """Euler-Maruyama from grid end down to grid start.

    x_{j-1} = x_j - drift(t_j, x_j) dt + chol(kappa(t_j)) sqrt(dt) xi_j,
    i.e. the same stepping with time descending and the drift applied with
    the reverse-time sign convention.
    """
    X = np.array(np.atleast_2d(np.asarray(x1_batch, dtype=float)), copy=True)
    S, k = X.shape
    dt, times = grid.dt, grid.times
    sqdt = np.sqrt(dt)
    chols = _kappa_factors(schedule, times)
    save = _save_indices(grid, save_times)
    desc = save[::-1]
    out = np.empty((S, desc.size, k))
    pos = 0
    if desc[0] == grid.n_steps:
        out[:, 0] = X
        pos = 1
    for j in range(grid.n_steps, 0, -1):
        t = times[j]
        X = X - drift(t, X, pin) * dt
        L = chols[j]
        if L.any():
            X = X + sqdt * (_step_noise(seed, j + grid.n_steps + 1, (S, k)) @ L.T)
        _check_finite(X, j)
        if pos < desc.size and desc[pos] == j - 1:
            out[:, pos] = X
            pos += 1
    return TrajectoryBatch(grid=grid, times=times[desc], paths=out,
                           direction="reverse", seed=seed)


def sample_bridge_exact(spec: BridgeSpec, t_list, S: int, seed: int) -> TrajectoryBatch:
    """Draw i.i.d. samples from the closed-form bridge marginal at each time.

    Simulation-free: each requested time gets S independent draws through the
    marginal's Cholesky factor.  Pinned times (zero covariance) return the
    endpoint exactly.
    """
    t_list = list(t_list)
    k = spec.dim
    out = np.empty((S, len(t_list), k))
    for i, t in enumerate(t_list):
        m = spec.marginal(t)
        rng = counter_rng(seed, _TAG_EXACT, i)
        out[:, i, :] = m.sample(S, rng)
    return TrajectoryBatch(grid=spec.grid, times=np.asarray(t_list, dtype=float),
                           paths=out, direction="forward", seed=seed)


def affine_drift_field(schedule) -> DriftField:
    """Drift field of the base process: A(t) x + c(t)."""

    def ev(t, X, pin):
        A = np.asarray(schedule.A(t), dtype=float)
        c = np.asarray(schedule.c(t), dtype=float)
        return X @ A.T + c

    return DriftField(evaluator=ev, direction="forward", name="affine")


def pinned_drift_field(bar_schedule, x1) -> DriftField:
    """Drift field of the pinned family: Abar(t) (x1 - x).

    ``x1`` may be a single endpoint or a per-path batch; a pin batch passed
    at call time takes precedence.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))

    def ev(t, X, pin):
        target = x1 if pin is None else pin
        Abar = np.asarray(bar_schedule.A(t), dtype=float)
        return (target - X) @ Abar.T

    return DriftField(evaluator=ev, direction="forward", name="pinned")


def doob_drift_field(schedule, end_tables) -> DriftField:
    """Base drift plus the endpoint-score correction kappa * score.

    ``pin`` supplies the endpoint batch the correction conditions on.
    """

    def ev(t, X, pin):
        if pin is None:
            raise DomainError("doob drift needs the endpoint pin batch")
        A = np.asarray(schedule.A(t), dtype=float)
        c = np.asarray(schedule.c(t), dtype=float)
        kap = np.asarray(schedule.kappa(t), dtype=float)
        s = end_tables.doob_score(t, X, pin)
        return X @ A.T + c + s @ kap.T

    return DriftField(evaluator=ev, direction="forward", name="endpoint-corrected")
