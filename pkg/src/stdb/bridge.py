"""Closed-form Gaussian statistics of linear base processes and their pinned bridges.

Base process (affine drift, state-independent noise):

    dx = (A(t) x + c(t)) dt + dW,   E[dW dW^T] = kappa(t) dt.

Its transition law is Gaussian with mean ``W(t;s) x_s + int W c`` and
covariance ``int W kappa W^T`` (module :mod:`stdb.propagator`).

Pinning the endpoint x(1) via the usual drift correction adds
``kappa * grad_x log p(x1 | x, t)`` to the drift.  For the base process that
endpoint score is itself Gaussian and available in closed form
(:func:`doob_score`).  When the base drift vanishes, the corrected process
collapses to the one-parameter "pinned" family

    dx = Abar(t) (x1 - x) dt + dW,

whose marginals have mean ``Wbar(t;0) x0 + (I - Wbar(t;0)) x1`` and covariance
``int Wbar kappa Wbar^T``, with ``Wbar`` the transition matrix of ``-Abar``.
:func:`bar_drift` builds ``Abar = A + kappa W(1;t)^T Sigma(t)^{-1}`` from the
base schedule; :class:`BridgeSpec` packages the pinned family for sampling and
marginal queries.

Sign conventions throughout are anchored by finite differences: the endpoint
score is the gradient of the log transition density in its *conditioning*
argument, and the pinned drift pulls the state toward the endpoint (the scalar
zero-drift case gives score ``(x1 - x)/(1 - t)`` and ``Abar = 1/(1 - t)``).

:func:`conditioned_marginal` gives the exact two-endpoint conditional law by
Gaussian conditioning; it agrees with the pinned family whenever the base
drift is zero and serves as the independent oracle elsewhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DomainError, MissingPropagator, NearPinned, NotPSD
from .grids import TimeGrid
from .propagator import (Propagator, covariance_integral, drift_offset_integral,
                         solve_propagator)
from .schedules import DriftSchedule, TabulatedSchedule

_LOG_2PI = math.log(2.0 * math.pi)

#: Jitter ladder for covariance factorization, relative to trace(cov)/k.
_JITTER_START = 1e-10
_JITTER_MAX = 1e-6

#: Condition-number guard for endpoint covariances.
_PIN_COND_LIMIT = 1e14


def jittered_cholesky(cov: np.ndarray):
    """Lower Cholesky factor of ``cov`` with an escalating diagonal jitter.

    Returns ``(chol, jitter_used)``.  A matrix that is exactly zero returns
    ``(None, 0.0)`` (degenerate point mass); one that stays indefinite past
    the jitter ladder raises :class:`NotPSD`.
    """
    cov = np.asarray(cov, dtype=float)
    k = cov.shape[0]
    scale = float(np.trace(cov)) / k
    if scale == 0.0 and not cov.any():
        return None, 0.0
    if scale <= 0.0:
        raise NotPSD(f"covariance trace {scale * k:.3g} is not positive")
    jitter = _JITTER_START
    eye = np.eye(k)
    while jitter <= _JITTER_MAX * 1.0000001:
        try:
            return np.linalg.cholesky(cov + jitter * scale * eye), jitter * scale
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPSD("covariance not factorizable within jitter budget")


@dataclass
class GaussianMarginal:
    """Mean and covariance of a Gaussian marginal, with a cached factorization.

    ``chol`` is None for the degenerate zero-covariance case (pinned times).
    """

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray | None = field(default=None)
    jitter: float = 0.0

    @classmethod
    def from_moments(cls, mean, cov) -> "GaussianMarginal":
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        cov = 0.5 * (cov + cov.T)
        k = mean.shape[0]
        scale = max(1.0, float(np.trace(cov)) / k)
        min_eig = float(np.linalg.eigvalsh(cov)[0]) if cov.any() else 0.0
        if min_eig < -1e-10 * scale:
            raise NotPSD(f"marginal covariance has eigenvalue {min_eig:.3g}")
        chol, jitter = jittered_cholesky(cov)
        return cls(mean=mean, cov=cov, chol=chol, jitter=jitter)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def degenerate(self) -> bool:
        return self.chol is None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.degenerate:
            return np.tile(self.mean, (n, 1))
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self.chol.T

    def to_json(self, path=None):
        """Mean plus the lower triangle of the covariance, row by row."""
        k = self.dim
        tril = [float(self.cov[i, j]) for i in range(k) for j in range(i + 1)]
        payload = {"dim": k, "mean": self.mean.tolist(), "cov_lower": tril,
                   "degenerate": self.degenerate}
        if path is not None:
            with open(path, "w") as fh:
                json.dump(payload, fh)
        return payload

    @classmethod
    def from_json(cls, payload) -> "GaussianMarginal":
        if isinstance(payload, (str, bytes)) or hasattr(payload, "read"):
            with open(payload) as fh:
                payload = json.load(fh)
        k = payload["dim"]
        cov = np.zeros((k, k))
        it = iter(payload["cov_lower"])
        for i in range(k):
            for j in range(i + 1):
                cov[i, j] = cov[j, i] = next(it)
        return cls.from_moments(np.array(payload["mean"]), cov)


def gaussian_logpdf(m: GaussianMarginal, x: np.ndarray) -> float | np.ndarray:
    """Exact multivariate normal log-density via the stored Cholesky factor.

    Accepts a single point (k,) or a batch (S, k).
    """
    if m.chol is None:
        raise NotPSD("degenerate marginal has no density")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    resid = pts - m.mean
    z = scipy.linalg.solve_triangular(m.chol, resid.T, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(m.chol))))
    quad = np.sum(z * z, axis=0)
    out = -0.5 * (m.dim * _LOG_2PI + logdet + quad)
    return float(out[0]) if single else out


def basic_conditional(schedule: DriftSchedule, prop: Propagator, x_from,
                      t_from: float, t_to: float) -> GaussianMarginal:
    """Law of x(t_to) given x(t_from) = x_from under the base process."""
    if not (prop.grid.contains(t_from) and prop.grid.contains(t_to)):
        raise MissingPropagator(
            f"interval [{t_from}, {t_to}] outside propagator grid "
            f"[{prop.grid.t_start}, {prop.grid.t_end}]")
    x_from = np.asarray(x_from, dtype=float)
    W = prop.omega(t_from, t_to)
    mean = W @ x_from + drift_offset_integral(schedule, prop, t_from, t_to)
    cov = covariance_integral(schedule, prop, t_from, t_to)
    return GaussianMarginal.from_moments(mean, cov)


class EndTables:
    """Cached endpoint tables of a base process solved up to its grid end.

    For every grid node t_j this holds the transition to the end
    ``W_end[j] = W(t_end; t_j)``, the remaining noise covariance
    ``sigma_end[j] = int_{t_j}^{t_end} W kappa W^T``, and the remaining drift
    offset ``offset_end[j] = int_{t_j}^{t_end} W c``.  Values between nodes
    are linear interpolations.
    """

    def __init__(self, schedule: DriftSchedule, prop: Propagator):
        self.schedule = schedule
        self.prop = prop
        grid = prop.grid
        n, k, dt = grid.n_steps, prop.dim, grid.dt
        self.omega_end = prop.omega_end_table()
        kappas = np.stack([np.asarray(schedule.kappa(t), dtype=float) for t in grid.times])
        cs = np.stack([np.asarray(schedule.c(t), dtype=float) for t in grid.times])
        G = np.einsum("jab,jbc,jdc->jad", self.omega_end, kappas, self.omega_end)
        sigma = np.empty((n + 1, k, k))
        sigma[n] = 0.0
        for j in range(n - 1, -1, -1):
            sigma[j] = sigma[j + 1] + 0.5 * dt * (G[j] + G[j + 1])
        self.sigma_end = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))
        g = np.einsum("jab,jb->ja", self.omega_end, cs)
        offset = np.empty((n + 1, k))
        offset[n] = 0.0
        for j in range(n - 1, -1, -1):
            offset[j] = offset[j + 1] + 0.5 * dt * (g[j] + g[j + 1])
        self.offset_end = offset
        self.kappas = kappas
        self.A_nodes = np.stack([np.asarray(schedule.A(t), dtype=float) for t in grid.times])
        self._zero_drift = not self.A_nodes.any()

    def _interp(self, table, t):
        grid = self.prop.grid
        if not grid.contains(t):
            raise MissingPropagator(f"t={t} outside grid [{grid.t_start}, {grid.t_end}]")
        pos = (t - grid.t_start) / grid.dt
        j = int(np.floor(pos))
        j = min(max(j, 0), grid.n_steps - 1)
        w = pos - j
        return (1.0 - w) * table[j] + w * table[j + 1]

    def _pin_pieces(self, t):
        W = self._interp(self.omega_end, t)
        S = self._interp(self.sigma_end, t)
        b = self._interp(self.offset_end, t)
        scale = max(float(np.trace(S)) / self.prop.dim, 0.0)
        if scale <= 0.0 or np.linalg.cond(S) > _PIN_COND_LIMIT:
            raise NearPinned(f"endpoint covariance singular at t={t:.6g}")
        return W, S, b

    def doob_score(self, t: float, x, x1) -> np.ndarray:
        """Gradient of log p(x1 | x, t) with respect to x; batched over rows of x."""
        W, S, b = self._pin_pieces(t)
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        r = np.atleast_2d(np.asarray(x1, dtype=float)) - X @ W.T - b
        y = np.linalg.solve(S, r.T).T
        out = y @ W
        return out[0] if single else out

    def bar_drift(self, t: float) -> np.ndarray:
        """Pinned-family drift matrix A(t) + kappa(t) W(1;t)^T Sigma(t)^{-1}."""
        W, S, _ = self._pin_pieces(t)
        kap = np.asarray(self.schedule.kappa(t), dtype=float)
        M = np.linalg.solve(S, W)          # Sigma^{-1} W
        bar = np.asarray(self.schedule.A(t), dtype=float) + kap @ M.T
        if self._zero_drift and np.allclose(kap, np.eye(self.prop.dim), atol=1e-12):
            # Zero base drift with unit noise: both characterizations coincide.
            alt = np.linalg.inv(S)
            if not np.allclose(bar, alt, atol=1e-8 * (1.0 + np.linalg.norm(alt))):
                raise AssertionError("pinned-drift consistency check failed")
        return bar

    def bar_table(self, grid: TimeGrid) -> TabulatedSchedule:
        """Tabulate the pinned-family drift on a clipped grid."""
        A = np.stack([self.bar_drift(t) for t in grid.times])
        kap = np.stack([np.asarray(self.schedule.kappa(t), dtype=float) for t in grid.times])
        return TabulatedSchedule(times=grid.times.copy(), A_table=A, kappa_table=kap,
                                 name="bar(" + self.schedule.name + ")")


def doob_score(schedule: DriftSchedule, prop: Propagator, t: float, x_t, x1) -> np.ndarray:
    """Endpoint score of the base process; see :meth:`EndTables.doob_score`."""
    return EndTables(schedule, prop).doob_score(t, x_t, x1)


def bar_drift(schedule: DriftSchedule, prop: Propagator, t: float) -> np.ndarray:
    """Pinned-family drift matrix derived from the base schedule at time t."""
    return EndTables(schedule, prop).bar_drift(t)


def _negated(schedule) -> DriftSchedule:
    dim = schedule.dim
    return DriftSchedule(dim=dim,
                         A=lambda t: -np.asarray(schedule.A(t), dtype=float),
                         c=lambda t: np.zeros(dim),
                         kappa=schedule.kappa,
                         name="neg(" + getattr(schedule, "name", "bar") + ")")


class BridgeSpec:
    """A pinned bridge between x0 and x1 on a clipped grid.

    Built either directly from a pinned-family drift ``Abar`` or from a base
    schedule (``Abar`` derived via :func:`bar_drift`).  Marginal statistics
    come from per-node tables of the transition matrix of ``-Abar`` and the
    accumulated covariance, so queries are O(1) after construction.
    """

    def __init__(self, bar_schedule, x0, x1, grid: TimeGrid, basic=None):
        self.bar = bar_schedule
        self.x0 = np.asarray(x0, dtype=float)
        self.x1 = np.asarray(x1, dtype=float)
        self.grid = grid
        self.dim = bar_schedule.dim
        if not (np.all(np.isfinite(self.x0)) and np.all(np.isfinite(self.x1))):
            raise DomainError("bridge endpoints must be finite")
        # basic = (schedule, prop, EndTables) when derived from a base process
        self.basic = basic
        self._tables = None

    @classmethod
    def from_bar(cls, bar_schedule, x0, x1, grid: TimeGrid) -> "BridgeSpec":
        return cls(bar_schedule, x0, x1, grid)

    @classmethod
    def from_basic(cls, schedule: DriftSchedule, x0, x1, grid: TimeGrid,
                   basic_grid: TimeGrid | None = None) -> "BridgeSpec":
        if basic_grid is None:
            n_basic = int(round((1.0 - 0.0) / grid.dt))
            basic_grid = TimeGrid(0.0, 1.0, n_basic)
        prop = solve_propagator(schedule, basic_grid)
        tables = EndTables(schedule, prop)
        bar = tables.bar_table(grid)
        return cls(bar, x0, x1, grid, basic=(schedule, prop, tables))

    def _build_tables(self):
        if self._tables is not None:
            return self._tables
        neg = _negated(self.bar)
        prop = solve_propagator(neg, self.grid)
        n, k, dt = self.grid.n_steps, self.dim, self.grid.dt
        wbar0 = prop.omega_start_table()            # Wbar(t_j; t_start)
        kappas = np.stack([np.asarray(self.bar.kappa(t), dtype=float)
                           for t in self.grid.times])
        cov = np.empty((n + 1, k, k))
        cov[0] = 0.0
        for j in range(n):
            F = prop.factors[j]
            cov[j + 1] = F @ cov[j] @ F.T + 0.5 * dt * (F @ kappas[j] @ F.T + kappas[j + 1])
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        self._tables = (prop, wbar0, cov)
        return self._tables

    def marginal_at_index(self, j: int) -> GaussianMarginal:
        _, wbar0, cov = self._build_tables()
        W = wbar0[j]
        mean = W @ self.x0 + (np.eye(self.dim) - W) @ self.x1
        return GaussianMarginal.from_moments(mean, cov[j])

    def marginal(self, t: float) -> GaussianMarginal:
        if t < self.grid.t_start - 1e-12 or t > self.grid.t_end + 1e-12:
            raise NearPinned(f"t={t} outside clipped bridge grid")
        return self.marginal_at_index(self.grid.index_of(t))

    def terminal_contraction(self) -> float:
        """Spectral norm of Wbar(t_end; t_start); near zero once fully pinned.

        Drift families with a zero eigenchannel (grid Laplacians) keep that
        channel at 1 by construction, so this is a diagnostic, not an error.
        """
        _, wbar0, _ = self._build_tables()
        return float(np.linalg.norm(wbar0[-1], 2))

    def node_tables(self):
        """(times, Wbar(t_j;0), cov_j) arrays for vectorized consumers."""
        _, wbar0, cov = self._build_tables()
        return self.grid.times, wbar0, cov


def bridge_marginal(spec: BridgeSpec, t: float) -> GaussianMarginal:
    """Marginal law of the pinned bridge at grid time t."""
    return spec.marginal(t)


def _eigchannel_variance(lambdas: np.ndarray, t: float) -> np.ndarray:
    """Per-eigenchannel bridge variance ((1-t)^{2l} - (1-t)) / (1 - 2l).

    Evaluated in the numerically stable form -(1-t) log(1-t) * expm1(y)/y with
    y = (2l - 1) log(1-t), which covers the removable singularity at l = 1/2.
    """
    if t == 0.0:
        return np.zeros_like(np.asarray(lambdas, dtype=float))
    log1mt = math.log(1.0 - t)
    y = (2.0 * np.asarray(lambdas, dtype=float) - 1.0) * log1mt
    phi = np.where(np.abs(y) < 1e-8, 1.0 + 0.5 * y, np.expm1(y) / np.where(y == 0, 1.0, y))
    return -(1.0 - t) * log1mt * phi


def laplacian_bridge_closed_form(basis, x0, x1, t: float) -> GaussianMarginal:
    """Bridge marginal of the spatial-mixing family in the Laplacian eigenbasis.

    Mean ``(1-t)^L x0 + (I - (1-t)^L) x1``; covariance diagonal per
    eigenchannel via :func:`_eigchannel_variance`.
    """
    from .laplacian import matrix_power_one_minus_t
    if not 0.0 <= t < 1.0:
        raise DomainError(f"t must lie in [0, 1), got {t}")
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    W = matrix_power_one_minus_t(basis, t)
    mean = W @ x0 + (np.eye(basis.dim) - W) @ x1
    v = _eigchannel_variance(basis.lambdas, t)
    cov = (basis.P * v) @ basis.P.T
    return GaussianMarginal.from_moments(mean, cov)


def conditioned_marginal(schedule: DriftSchedule, prop: Propagator,
                         x0, x1, t: float) -> GaussianMarginal:
    """Exact law of x(t) given both endpoints, by Gaussian conditioning.

    Independent of the pinned-family construction: it multiplies the two
    transition densities p(x_t | x0) and p(x1 | x_t) and normalizes.
    """
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    t0, t1 = prop.grid.t_start, prop.grid.t_end
    if abs(t - t0) < 1e-12:
        return GaussianMarginal.from_moments(x0, np.zeros((prop.dim, prop.dim)))
    if abs(t - t1) < 1e-12:
        return GaussianMarginal.from_moments(x1, np.zeros((prop.dim, prop.dim)))
    left = basic_conditional(schedule, prop, x0, t0, t)
    W2 = prop.omega(t, t1)
    S2 = covariance_integral(schedule, prop, t, t1)
    b2 = drift_offset_integral(schedule, prop, t, t1)
    S1 = left.cov
    lam = np.linalg.inv(S1) + W2.T @ np.linalg.solve(S2, W2)
    cov = np.linalg.inv(lam)
    rhs = np.linalg.solve(S1, left.mean) + W2.T @ np.linalg.solve(S2, x1 - b2)
    return GaussianMarginal.from_moments(cov @ rhs, cov)


class ConditionedGaussianBridge:
    """Per-node tables of the exact two-endpoint conditional law.

    The conditional mean is affine in the endpoints,
    ``mean_j = M0_j x0 + M1_j x1 + v_j``, and the conditional covariance is
    endpoint-free, so one pass over the grid serves any endpoint batch.
    """

    def __init__(self, schedule: DriftSchedule, prop: Propagator):
        self.schedule = schedule
        self.prop = prop
        grid = prop.grid
        n, k, dt = grid.n_steps, prop.dim, grid.dt
        tables = EndTables(schedule, prop)
        start = prop.omega_start_table()
        kappas = tables.kappas
        cs = np.stack([np.asarray(schedule.c(t), dtype=float) for t in grid.times])
        S1 = np.empty((n + 1, k, k))
        b1 = np.empty((n + 1, k))
        S1[0] = 0.0
        b1[0] = 0.0
        for j in range(n):
            F = prop.factors[j]
            S1[j + 1] = F @ S1[j] @ F.T + 0.5 * dt * (F @ kappas[j] @ F.T + kappas[j + 1])
            b1[j + 1] = F @ b1[j] + 0.5 * dt * (F @ cs[j] + cs[j + 1])
        eye = np.eye(k)
        self.times = grid.times
        self.M0 = np.empty((n + 1, k, k))
        self.M1 = np.empty((n + 1, k, k))
        self.const = np.empty((n + 1, k))
        self.cov = np.empty((n + 1, k, k))
        self.prec = np.empty((n + 1, k, k))
        self.chol = np.zeros((n + 1, k, k))
        self.M0[0], self.M1[0], self.const[0], self.cov[0] = eye, 0.0, 0.0, 0.0
        self.M0[n], self.M1[n], self.const[n], self.cov[n] = 0.0, eye, 0.0, 0.0
        self.prec[0] = self.prec[n] = np.nan
        for j in range(1, n):
            W2, S2, b2 = tables.omega_end[j], tables.sigma_end[j], tables.offset_end[j]
            S1inv = np.linalg.inv(S1[j])
            lam = S1inv + W2.T @ np.linalg.solve(S2, W2)
            cov = np.linalg.inv(lam)
            cov = 0.5 * (cov + cov.T)
            self.cov[j] = cov
            self.prec[j] = lam
            self.M0[j] = cov @ S1inv @ start[j]
            self.M1[j] = cov @ W2.T @ np.linalg.inv(S2)
            self.const[j] = cov @ (S1inv @ b1[j] - W2.T @ np.linalg.solve(S2, b2))
            self.chol[j], _ = jittered_cholesky(cov)

    def mean(self, j: int, x0, x1) -> np.ndarray:
        """Conditional mean at node j; batched over rows of x0/x1."""
        X0 = np.atleast_2d(np.asarray(x0, dtype=float))
        X1 = np.atleast_2d(np.asarray(x1, dtype=float))
        out = X0 @ self.M0[j].T + X1 @ self.M1[j].T + self.const[j]
        return out[0] if np.asarray(x0).ndim == 1 else out

    def marginal(self, j: int, x0, x1) -> GaussianMarginal:
        return GaussianMarginal.from_moments(self.mean(j, x0, x1), self.cov[j])

    def score(self, j: int, x_t, x0, x1) -> np.ndarray:
        """Gradient of the conditional log-density in x_t: -prec (x_t - mean)."""
        if j == 0 or j == self.prop.grid.n_steps:
            raise NearPinned("conditional score undefined at the pinned endpoints")
        X = np.atleast_2d(np.asarray(x_t, dtype=float))
        r = X - np.atleast_2d(self.mean(j, x0, x1))
        out = -(r @ self.prec[j].T)
        return out[0] if np.asarray(x_t).ndim == 1 else out


class GeneralNormalBridge:
    """Bridge of a base process with a drift offset c(t), pinned at the grid end.

    The endpoint-score correction turns the base schedule into another affine
    schedule: drift matrix ``Atil = A - P W_end`` and offset
    ``vsig = c - P b`` with pin coupling ``P = kappa W_end^T Sigma^{-1}``.
    Propagating that schedule gives the marginal at time tau,

        N( Wtil(tau;0) x0 + Lam(tau) x_pin + vtil(tau);  Stil(tau) ),

    where ``Lam = int Wtil P``, ``vtil = int Wtil vsig`` and
    ``Stil = int Wtil kappa Wtil^T``.
    """

    def __init__(self, schedule: DriftSchedule, prop: Propagator, x_pin, grid: TimeGrid):
        if grid.t_end >= prop.grid.t_end - 1e-12:
            raise NearPinned("bridge grid must stop short of the pinned endpoint")
        self.schedule = schedule
        self.x_pin = np.asarray(x_pin, dtype=float)
        self.grid = grid
        tables = EndTables(schedule, prop)
        k = prop.dim
        n = grid.n_steps
        P = np.empty((n + 1, k, k))
        tilde_A = np.empty((n + 1, k, k))
        vsig = np.empty((n + 1, k))
        kappas = np.empty((n + 1, k, k))
        for j, t in enumerate(grid.times):
            W, S, b = tables._pin_pieces(t)
            kap = np.asarray(schedule.kappa(t), dtype=float)
            P[j] = kap @ np.linalg.solve(S, W).T
            tilde_A[j] = np.asarray(schedule.A(t), dtype=float) - P[j] @ W
            vsig[j] = np.asarray(schedule.c(t), dtype=float) - P[j] @ b
            kappas[j] = kap
        self.tilde_A = tilde_A
        self.varsigma = vsig
        self.pin_coupling = P
        tab = TabulatedSchedule(times=grid.times.copy(), A_table=tilde_A,
                                kappa_table=kappas, c_table=vsig, name="tilde")
        self.tilde_prop = solve_propagator(tab.as_schedule(), grid)
        dt = grid.dt
        lam = np.empty((n + 1, k, k))
        vtil = np.empty((n + 1, k))
        stil = np.empty((n + 1, k, k))
        lam[0], vtil[0], stil[0] = 0.0, 0.0, 0.0
        for j in range(n):
            F = self.tilde_prop.factors[j]
            lam[j + 1] = F @ lam[j] + 0.5 * dt * (F @ P[j] + P[j + 1])
            vtil[j + 1] = F @ vtil[j] + 0.5 * dt * (F @ vsig[j] + vsig[j + 1])
            stil[j + 1] = F @ stil[j] @ F.T + 0.5 * dt * (F @ kappas[j] @ F.T + kappas[j + 1])
        self.tilde_lambda = lam
        self.tilde_varsigma = vtil
        self.tilde_sigma = 0.5 * (stil + np.swapaxes(stil, 1, 2))
        self.tilde_omega = self.tilde_prop.omega_start_table()

    def marginal(self, tau: float, x0) -> GaussianMarginal:
        j = self.grid.index_of(tau)
        x0 = np.asarray(x0, dtype=float)
        mean = self.tilde_omega[j] @ x0 + self.tilde_lambda[j] @ self.x_pin \
            + self.tilde_varsigma[j]
        return GaussianMarginal.from_moments(mean, self.tilde_sigma[j])


def general_normal_bridge(schedule: DriftSchedule, prop: Propagator, x_pin,
                          grid: TimeGrid) -> GeneralNormalBridge:
    """Construct the offset-drift bridge tables; see :class:`GeneralNormalBridge`."""
    return GeneralNormalBridge(schedule, prop, x_pin, grid)


def fp_residual(spec: BridgeSpec, grid_x: np.ndarray, t: float) -> float:
    """Max-norm residual of the pinned-process transport equation in one dimension.

    Builds the exact bridge density from closed-form Gaussians and checks,
    with central differences in x and t (steps tied to the spatial spacing),

        d_t p + d_x[(A x + c + kappa * score) p] - (kappa / 2) d_xx p = 0.

    Requires a spec built from a scalar base schedule with kappa > 0.
    """
    if spec.basic is None:
        raise DomainError("fp_residual needs a spec built from a base schedule")
    schedule, prop, tables = spec.basic
    if spec.dim != 1:
        raise DomainError("fp_residual is one-dimensional")
    kap = float(np.asarray(schedule.kappa(t)).reshape(()))
    if kap <= 0.0:
        raise DomainError("fp_residual needs strictly positive noise")
    grid_x = np.asarray(grid_x, dtype=float)
    h = float(grid_x[1] - grid_x[0])
    x0, x1 = spec.x0, spec.x1

    def density(ts):
        m = conditioned_marginal(schedule, prop, x0, x1, ts)
        mu = float(m.mean[0])
        var = float(m.cov[0, 0])
        return np.exp(-0.5 * (grid_x - mu) ** 2 / var) / math.sqrt(2.0 * math.pi * var)

    def flux(ts):
        m = conditioned_marginal(schedule, prop, x0, x1, ts)
        mu = float(m.mean[0])
        var = float(m.cov[0, 0])
        p = np.exp(-0.5 * (grid_x - mu) ** 2 / var) / math.sqrt(2.0 * math.pi * var)
        a = float(np.asarray(schedule.A(ts)).reshape(()))
        c = float(np.asarray(schedule.c(ts)).reshape(()))
        kap_s = float(np.asarray(schedule.kappa(ts)).reshape(()))
        score = tables.doob_score(ts, grid_x[:, None], x1)[:, 0]
        return (a * grid_x + c + kap_s * score) * p

    p_mid = density(t)
    d_t = (density(t + h) - density(t - h)) / (2.0 * h)
    g = flux(t)
    d_x_flux = (g[2:] - g[:-2]) / (2.0 * h)
    d_xx = (p_mid[2:] - 2.0 * p_mid[1:-1] + p_mid[:-2]) / (h * h)
    resid = d_t[1:-1] + d_x_flux - 0.5 * kap * d_xx
    return float(np.max(np.abs(resid)))
