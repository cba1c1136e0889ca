"""State-transition matrices of the linear matrix ODE d/dt W(t; tau) = A(t) W(t; tau).

``W(t; tau)`` (with ``W(tau; tau) = I``) propagates the deterministic part of
an affine SDE between two times.  The solver stores one factor per grid
interval; transitions between arbitrary grid nodes are composed on demand,
which keeps memory at O(n_steps * k^2).

Each interval is integrated with classical fourth-order Runge-Kutta, splitting
into substeps whenever ``||A|| * dt`` is large so that stiff near-endpoint
bridge drifts stay accurate.

The same machinery yields the noise covariance accumulated between two times,

    Sigma = integral_{t_from}^{t_to}  W(t_to; u) kappa(u) W(t_to; u)^T du,

computed with composite trapezoid quadrature on the solver grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IllConditioned, MissingPropagator, NotPSD, SingularSchedule
from .grids import TimeGrid
from .schedules import DriftSchedule

#: Frobenius-norm tolerance for the composition (semigroup) identity in tests.
TOL_SEMIGROUP = 1e-8

#: Tolerance for W(t; tau) W(t; tau)^{-1} = I.
TOL_INV = 1e-8

#: Eigenvalues of an accumulated covariance may undershoot zero by this much.
TOL_PSD = 1e-10

#: Condition-number threshold above which a step factor refuses to invert.
COND_LIMIT = 1e12

# Target ||A||*h per RK4 substep; keeps the local error far below quadrature error.
_RK4_TARGET = 0.05
_RK4_MAX_SUBSTEPS = 128


def _rk4_interval(A_fn, t0: float, dt: float, n_sub: int) -> np.ndarray:
    """Integrate dW/dt = A(t) W over [t0, t0+dt] from W=I with n_sub RK4 steps."""
    k = np.asarray(A_fn(t0), dtype=float).shape[0]
    W = np.eye(k)
    h = dt / n_sub
    for m in range(n_sub):
        t = t0 + m * h
        k1 = A_fn(t) @ W
        half = W + 0.5 * h * k1
        k2 = A_fn(t + 0.5 * h) @ half
        k3 = A_fn(t + 0.5 * h) @ (W + 0.5 * h * k2)
        k4 = A_fn(t + h) @ (W + h * k3)
        W = W + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return W


@dataclass
class Propagator:
    """Per-interval transition factors of a drift schedule on a fixed grid.

    ``factors[j]`` is ``W(t_{j+1}; t_j)``; arbitrary node pairs are lazy
    compositions.  Instances are immutable after construction and safe to
    share across threads for read-only queries.
    """

    grid: TimeGrid
    dim: int
    factors: np.ndarray                     # (n_steps, k, k)
    _inv_factors: np.ndarray = field(default=None, repr=False)
    _end_table: np.ndarray = field(default=None, repr=False)
    _start_table: np.ndarray = field(default=None, repr=False)

    def index_of(self, t: float) -> int:
        return self.grid.index_of(t)

    def omega(self, t_from: float, t_to: float) -> np.ndarray:
        """Transition matrix W(t_to; t_from) for grid nodes t_from <= t_to."""
        i, j = self.index_of(t_from), self.index_of(t_to)
        if i > j:
            raise MissingPropagator(f"need t_from <= t_to, got {t_from} > {t_to}")
        W = np.eye(self.dim)
        for m in range(i, j):
            W = self.factors[m] @ W
        return W

    def omega_end_table(self) -> np.ndarray:
        """Array of W(t_end; t_j) for every grid node j (cached)."""
        if self._end_table is None:
            n = self.grid.n_steps
            table = np.empty((n + 1, self.dim, self.dim))
            table[n] = np.eye(self.dim)
            for j in range(n - 1, -1, -1):
                table[j] = table[j + 1] @ self.factors[j]
            table.setflags(write=False)
            self._end_table = table
        return self._end_table

    def omega_start_table(self) -> np.ndarray:
        """Array of W(t_j; t_start) for every grid node j (cached)."""
        if self._start_table is None:
            n = self.grid.n_steps
            table = np.empty((n + 1, self.dim, self.dim))
            table[0] = np.eye(self.dim)
            for j in range(n):
                table[j + 1] = self.factors[j] @ table[j]
            table.setflags(write=False)
            self._start_table = table
        return self._start_table

    def inv_factors(self) -> np.ndarray:
        if self._inv_factors is None:
            conds = np.array([np.linalg.cond(F) for F in self.factors])
            worst = int(np.argmax(conds))
            if not np.all(np.isfinite(conds)) or conds[worst] > COND_LIMIT:
                raise IllConditioned(
                    f"step factor at t={self.grid.times[worst]:.6g} has condition "
                    f"number {conds[worst]:.3g}")
            inv = np.linalg.inv(self.factors)
            inv.setflags(write=False)
            self._inv_factors = inv
        return self._inv_factors


def solve_propagator(schedule: DriftSchedule, grid: TimeGrid) -> Propagator:
    """Solve for all per-interval transition factors of ``schedule`` on ``grid``."""
    schedule.validate_on_grid(grid, check_psd=False)
    n, k, dt = grid.n_steps, schedule.dim, grid.dt
    factors = np.empty((n, k, k))
    for j in range(n):
        t = grid.times[j]
        a_norm = np.linalg.norm(schedule.A(t + 0.5 * dt), "fro")
        n_sub = int(min(_RK4_MAX_SUBSTEPS, max(1, np.ceil(a_norm * dt / _RK4_TARGET))))
        F = _rk4_interval(schedule.A, t, dt, n_sub)
        if not np.all(np.isfinite(F)):
            raise SingularSchedule(t, "transition factor diverged")
        factors[j] = F
    factors.setflags(write=False)
    return Propagator(grid=grid, dim=k, factors=factors)


def propagator_inverse_path(prop: Propagator, t: float) -> np.ndarray:
    """Inverse transition W^{-1}(t_end; t), composed from per-step inverse factors."""
    j = prop.index_of(t)
    inv = prop.inv_factors()
    W = np.eye(prop.dim)
    for m in range(j, prop.grid.n_steps):
        W = W @ inv[m]
    return W


def _kappa_nodes(schedule: DriftSchedule, grid: TimeGrid, i: int, j: int) -> np.ndarray:
    return np.stack([np.asarray(schedule.kappa(t), dtype=float) for t in grid.times[i:j + 1]])


def covariance_integral(schedule: DriftSchedule, prop: Propagator,
                        t_from: float, t_to: float) -> np.ndarray:
    """Accumulated noise covariance between two grid times.

    Trapezoid rule over the solver grid; the result is symmetrized and
    checked for eigenvalues above ``-TOL_PSD`` (scaled).
    """
    i, j = prop.index_of(t_from), prop.index_of(t_to)
    if i > j:
        raise MissingPropagator(f"need t_from <= t_to, got {t_from} > {t_to}")
    k, dt = prop.dim, prop.grid.dt
    if i == j:
        return np.zeros((k, k))
    kappas = _kappa_nodes(schedule, prop.grid, i, j)
    # Walk backward from t_to so each node needs one extra factor composition.
    W = np.eye(k)
    G = np.empty_like(kappas)
    G[j - i] = kappas[j - i]
    for m in range(j - 1, i - 1, -1):
        W = W @ prop.factors[m]
        G[m - i] = W @ kappas[m - i] @ W.T
    sigma = dt * (G[0] * 0.5 + G[1:-1].sum(axis=0) + G[-1] * 0.5) if j - i > 1 \
        else dt * 0.5 * (G[0] + G[1])
    sigma = 0.5 * (sigma + sigma.T)
    scale = max(1.0, float(np.trace(sigma)) / k)
    min_eig = float(np.linalg.eigvalsh(sigma)[0])
    if min_eig < -TOL_PSD * scale:
        raise NotPSD(f"covariance integral has eigenvalue {min_eig:.3g}")
    return sigma


def drift_offset_integral(schedule: DriftSchedule, prop: Propagator,
                          t_from: float, t_to: float) -> np.ndarray:
    """Deterministic offset integral_{t_from}^{t_to} W(t_to; u) c(u) du (trapezoid)."""
    i, j = prop.index_of(t_from), prop.index_of(t_to)
    if i > j:
        raise MissingPropagator(f"need t_from <= t_to, got {t_from} > {t_to}")
    k, dt = prop.dim, prop.grid.dt
    if i == j:
        return np.zeros(k)
    cs = np.stack([np.asarray(schedule.c(t), dtype=float) for t in prop.grid.times[i:j + 1]])
    if not cs.any():
        return np.zeros(k)
    W = np.eye(k)
    g = np.empty_like(cs)
    g[j - i] = cs[j - i]
    for m in range(j - 1, i - 1, -1):
        W = W @ prop.factors[m]
        g[m - i] = W @ cs[m - i]
    if j - i > 1:
        return dt * (0.5 * g[0] + g[1:-1].sum(axis=0) + 0.5 * g[-1])
    return dt * 0.5 * (g[0] + g[1])
