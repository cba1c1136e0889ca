"""Uniform time grids on [0, 1] with optional clipping away from the pinned endpoint.

Schedules of the ``M/(1-t)`` kind are singular at t=1, so any grid meant to
carry them keeps a safety margin ``epsilon_clip`` from that endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

#: Default distance kept from the singular endpoint t=1.
EPS_DEFAULT = 1e-3

#: Default number of grid intervals.
N_STEPS_DEFAULT = 1000


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of ``n_steps`` intervals on ``[t_start, t_end]``.

    ``epsilon_clip`` records the distance kept from t=1; grids carrying a
    drift with a 1/(1-t) singularity must satisfy ``t_end <= 1 - epsilon_clip``.
    """

    t_start: float
    t_end: float
    n_steps: int
    epsilon_clip: float = 0.0
    times: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0.0 <= self.t_start < self.t_end <= 1.0):
            raise DomainError(f"need 0 <= t_start < t_end <= 1, got [{self.t_start}, {self.t_end}]")
        if self.n_steps < 1:
            raise DomainError(f"n_steps must be positive, got {self.n_steps}")
        if self.epsilon_clip < 0.0:
            raise DomainError(f"epsilon_clip must be >= 0, got {self.epsilon_clip}")
        if self.t_end > 1.0 - self.epsilon_clip + 1e-15:
            raise DomainError(
                f"t_end={self.t_end} exceeds 1 - epsilon_clip = {1.0 - self.epsilon_clip}"
            )
        times = np.linspace(self.t_start, self.t_end, self.n_steps + 1)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of the grid node equal to ``t`` (within ``tol``)."""
        idx = int(round((t - self.t_start) / self.dt))
        if idx < 0 or idx > self.n_steps or abs(self.times[idx] - t) > tol:
            raise DomainError(f"t={t} is not a grid time of {self}")
        return idx

    def contains(self, t: float, tol: float = 1e-12) -> bool:
        return self.t_start - tol <= t <= self.t_end + tol


def clipped_grid(n_steps: int = N_STEPS_DEFAULT, eps: float = EPS_DEFAULT,
                 t_start: float | None = None) -> TimeGrid:
    """Grid on ``[t_start, 1-eps]`` (default start ``eps``) for singular schedules."""
    start = eps if t_start is None else t_start
    return TimeGrid(start, 1.0 - eps, n_steps, epsilon_clip=eps)


def full_grid(n_steps: int = N_STEPS_DEFAULT) -> TimeGrid:
    """Grid covering all of [0, 1]; only valid for schedules finite at t=1."""
    return TimeGrid(0.0, 1.0, n_steps, epsilon_clip=0.0)
