"""Grid-graph Laplacians and the matrix functions used for spatial blurring.

The Laplacian of the rows x cols pixel grid (4-neighbor adjacency, open
boundary) is ``L = D - J`` with ``J`` the adjacency matrix and ``D`` the
diagonal degree matrix.  Powers ``(1-t)^L`` act as a progressive blur whose
strength per eigenchannel is ``(1-t)^{lambda_i}``; the zero eigenvalue
(constant vector) is fixed, so the image mean is preserved exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EigenFail, TooLarge

#: Largest dense dimension we are willing to eigendecompose (64 x 64 grid).
MAX_DIM = 4096


@dataclass(frozen=True)
class GridLaplacian:
    rows: int
    cols: int
    L: np.ndarray

    @property
    def dim(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class EigenBasis:
    """Orthogonal eigenvectors (columns of P) and ascending eigenvalues."""

    P: np.ndarray
    lambdas: np.ndarray

    @property
    def dim(self) -> int:
        return self.lambdas.shape[0]


def build_grid_laplacian(rows: int, cols: int, max_dim: int = MAX_DIM) -> GridLaplacian:
    """Laplacian L = D - J of the open-boundary 4-neighbor grid graph."""
    if rows < 1 or cols < 1:
        raise DomainError(f"grid must be at least 1x1, got {rows}x{cols}")
    k = rows * cols
    if k > max_dim:
        raise TooLarge(f"{rows}x{cols} grid gives dimension {k} > limit {max_dim}")
    J = np.zeros((k, k))

    def node(r, c):
        return r * cols + c

    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                J[node(r, c), node(r, c + 1)] = 1.0
                J[node(r, c + 1), node(r, c)] = 1.0
            if r + 1 < rows:
                J[node(r, c), node(r + 1, c)] = 1.0
                J[node(r + 1, c), node(r, c)] = 1.0
    D = np.diag(J.sum(axis=1))
    return GridLaplacian(rows=rows, cols=cols, L=D - J)


def eigendecompose(lap: GridLaplacian | np.ndarray) -> EigenBasis:
    """Orthogonal eigenbasis with ascending eigenvalues and a fixed sign convention.

    The first nonzero component of each eigenvector is made positive so the
    decomposition is deterministic across runs.
    """
    L = lap.L if isinstance(lap, GridLaplacian) else np.asarray(lap, dtype=float)
    if not np.allclose(L, L.T, atol=1e-12):
        raise DomainError("matrix must be symmetric")
    try:
        lambdas, P = np.linalg.eigh(L)
    except np.linalg.LinAlgError as exc:
        raise EigenFail(str(exc)) from exc
    for j in range(P.shape[1]):
        col = P[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            P[:, j] = -col
    return EigenBasis(P=P, lambdas=lambdas)


def matrix_power_one_minus_t(basis: EigenBasis, t: float) -> np.ndarray:
    """Blurring matrix (1-t)^L = P diag((1-t)^{lambda_i}) P^T for t in [0, 1)."""
    if not 0.0 <= t < 1.0:
        raise DomainError(f"t must lie in [0, 1), got {t}")
    if t == 0.0:
        return np.eye(basis.dim)
    diag = np.power(1.0 - t, basis.lambdas)
    M = (basis.P * diag) @ basis.P.T
    return 0.5 * (M + M.T)


def save_laplacian(lap: GridLaplacian, path, binary: bool = False) -> None:
    """Write a Laplacian as dense JSON or row-major float64 binary."""
    if binary:
        header = np.array([lap.rows, lap.cols], dtype="<i8")
        with open(path, "wb") as fh:
            fh.write(header.tobytes())
            fh.write(lap.L.astype("<f8").tobytes())
    else:
        with open(path, "w") as fh:
            json.dump({"rows": lap.rows, "cols": lap.cols, "L": lap.L.tolist()}, fh)


def load_laplacian(path, binary: bool = False) -> GridLaplacian:
    if binary:
        with open(path, "rb") as fh:
            rows, cols = np.frombuffer(fh.read(16), dtype="<i8")
            k = int(rows * cols)
            L = np.frombuffer(fh.read(8 * k * k), dtype="<f8").reshape(k, k).copy()
        return GridLaplacian(rows=int(rows), cols=int(cols), L=L)
    with open(path) as fh:
        payload = json.load(fh)
    return GridLaplacian(rows=payload["rows"], cols=payload["cols"],
                         L=np.array(payload["L"], dtype=float))
