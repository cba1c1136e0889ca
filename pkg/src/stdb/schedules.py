"""Time-dependent affine drift/diffusion schedules.

A schedule bundles three matrix/vector-valued functions of time:

* ``A(t)`` -- the k x k drift matrix acting on the state,
* ``c(t)`` -- a k-vector drift offset (zero for the plain linear processes),
* ``kappa(t)`` -- the k x k symmetric PSD noise covariance rate.

Schedules are plain callables so ODE solvers can sample them anywhere;
tabulated schedules interpolate linearly between grid nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, NotPSD, SingularSchedule
from .grids import TimeGrid

MatrixFn = Callable[[float], np.ndarray]
VectorFn = Callable[[float], np.ndarray]


def _as_matrix_fn(value, dim) -> MatrixFn:
    if callable(value):
        return value
    mat = np.asarray(value, dtype=float)
    if mat.shape != (dim, dim):
        raise DomainError(f"expected {dim}x{dim} matrix, got shape {mat.shape}")
    return lambda t, _m=mat: _m


def _as_vector_fn(value, dim) -> VectorFn:
    if callable(value):
        return value
    vec = np.asarray(value, dtype=float)
    if vec.shape != (dim,):
        raise DomainError(f"expected length-{dim} vector, got shape {vec.shape}")
    return lambda t, _v=vec: _v


@dataclass
class DriftSchedule:
    """Affine drift ``A(t) x + c(t)`` with noise covariance rate ``kappa(t)``."""

    dim: int
    A: MatrixFn
    c: VectorFn
    kappa: MatrixFn
    name: str = "custom"

    @classmethod
    def from_constants(cls, A, kappa, c=None, name="constant") -> "DriftSchedule":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        dim = A.shape[0]
        kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
        c = np.zeros(dim) if c is None else np.asarray(c, dtype=float)
        return cls(dim=dim,
                   A=_as_matrix_fn(A, dim),
                   c=_as_vector_fn(c, dim),
                   kappa=_as_matrix_fn(kappa, dim),
                   name=name)

    def validate_on_grid(self, grid: TimeGrid, check_psd: bool = True) -> None:
        """Raise SingularSchedule / NotPSD if the schedule misbehaves on ``grid``.

        PSD of kappa is checked by Cholesky success after a tiny jitter, which
        tolerates exact rank deficiency (kappa = 0 is legal).
        """
        for t in grid.times:
            a = np.asarray(self.A(t), dtype=float)
            c = np.asarray(self.c(t), dtype=float)
            k = np.asarray(self.kappa(t), dtype=float)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(c)) and np.all(np.isfinite(k))):
                raise SingularSchedule(t, f"schedule '{self.name}'")
            if check_psd:
                if not np.allclose(k, k.T, atol=1e-12):
                    raise NotPSD(f"kappa not symmetric at t={t:.6g}")
                scale = max(np.trace(k) / self.dim, 1.0)
                try:
                    np.linalg.cholesky(k + 1e-12 * scale * np.eye(self.dim))
                except np.linalg.LinAlgError:
                    raise NotPSD(f"kappa not PSD at t={t:.6g}") from None


@dataclass
class TabulatedSchedule:
    """Schedule stored as per-node tables, evaluated by linear interpolation.

    Queries outside the node range clamp to the nearest endpoint, which keeps
    one-step integrators well defined at the final node.
    """

    times: np.ndarray
    A_table: np.ndarray            # (n_nodes, k, k)
    kappa_table: np.ndarray        # (n_nodes, k, k)
    c_table: np.ndarray = None     # (n_nodes, k), zeros if omitted
    name: str = "tabulated"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.A_table = np.asarray(self.A_table, dtype=float)
        self.kappa_table = np.asarray(self.kappa_table, dtype=float)
        n, k = self.A_table.shape[0], self.A_table.shape[1]
        if self.c_table is None:
            self.c_table = np.zeros((n, k))
        else:
            self.c_table = np.asarray(self.c_table, dtype=float)
        if not np.all(np.diff(self.times) > 0):
            raise DomainError("tabulated schedule times must be strictly increasing")

    @property
    def dim(self) -> int:
        return self.A_table.shape[1]

    def _interp(self, table, t):
        ts = self.times
        if t <= ts[0]:
            return table[0]
        if t >= ts[-1]:
            return table[-1]
        j = int(np.searchsorted(ts, t) - 1)
        w = (t - ts[j]) / (ts[j + 1] - ts[j])
        return (1.0 - w) * table[j] + w * table[j + 1]

    def A(self, t):
        return self._interp(self.A_table, t)

    def c(self, t):
        return self._interp(self.c_table, t)

    def kappa(self, t):
        return self._interp(self.kappa_table, t)

    def as_schedule(self) -> DriftSchedule:
        return DriftSchedule(dim=self.dim, A=self.A, c=self.c, kappa=self.kappa, name=self.name)

    @classmethod
    def from_callable(cls, schedule: DriftSchedule, times) -> "TabulatedSchedule":
        times = np.asarray(times, dtype=float)
        A = np.stack([np.asarray(schedule.A(t), dtype=float) for t in times])
        kap = np.stack([np.asarray(schedule.kappa(t), dtype=float) for t in times])
        c = np.stack([np.asarray(schedule.c(t), dtype=float) for t in times])
        return cls(times=times, A_table=A, kappa_table=kap, c_table=c, name=schedule.name)

    def to_json(self, path) -> None:
        payload = {
            "name": self.name,
            "dim": int(self.dim),
            "times": self.times.tolist(),
            "A": self.A_table.tolist(),
            "kappa": self.kappa_table.tolist(),
            "c": self.c_table.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path) -> "TabulatedSchedule":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(times=np.array(payload["times"]),
                   A_table=np.array(payload["A"]),
                   kappa_table=np.array(payload["kappa"]),
                   c_table=np.array(payload["c"]),
                   name=payload.get("name", "custom-file"))


def brownian_schedule(dim: int) -> DriftSchedule:
    """Zero drift, identity noise rate: the plain Wiener base process."""
    return DriftSchedule.from_constants(np.zeros((dim, dim)), np.eye(dim), name="brownian")


def constant_schedule(a: float, dim: int, kappa_scale: float = 1.0) -> DriftSchedule:
    """Scalar-times-identity drift ``a I`` with noise rate ``kappa_scale I``."""
    return DriftSchedule.from_constants(a * np.eye(dim), kappa_scale * np.eye(dim),
                                        name=f"constant(a={a})")


def pinned_drift_schedule(M: np.ndarray, kappa=None, name="pinned") -> DriftSchedule:
    """Bridge-family drift ``M / (1 - t)`` pulling the state onto the endpoint.

    Singular at t=1; only evaluate on clipped grids.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    dim = M.shape[0]
    kappa = np.eye(dim) if kappa is None else np.atleast_2d(np.asarray(kappa, dtype=float))

    def A(t, _M=M):
        return _M / (1.0 - t)

    return DriftSchedule(dim=dim, A=A, c=_as_vector_fn(np.zeros(dim), dim),
                         kappa=_as_matrix_fn(kappa, dim), name=name)


def make_schedule(name: str, dim: int = 1, **params) -> DriftSchedule:
    """Look up a base-process schedule by registry name.

    Known names: ``brownian``, ``constant`` (param ``a``, optional
    ``kappa_scale``), ``laplacian`` (params ``rows``/``cols``; returns the
    base-level Laplacian drift ``a * L``), ``custom-file`` (param ``path``).
    """
    if name == "brownian":
        return brownian_schedule(dim)
    if name == "constant":
        return constant_schedule(params.get("a", 0.0), dim, params.get("kappa_scale", 1.0))
    if name == "laplacian":
        from .laplacian import build_grid_laplacian
        rows, cols = params["rows"], params["cols"]
        lap = build_grid_laplacian(rows, cols)
        scale = params.get("a", 1.0)
        return DriftSchedule.from_constants(scale * lap.L, np.eye(lap.dim),
                                            name=f"laplacian({rows}x{cols})")
    if name == "custom-file":
        return TabulatedSchedule.from_json(params["path"]).as_schedule()
    raise DomainError(f"unknown schedule name '{name}'")
