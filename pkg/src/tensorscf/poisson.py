"""Shifted Laplacian inversion on Tucker tensors.

The 7-point finite-difference Laplacian with homogeneous Dirichlet values on
the ghost layer just outside the grid is diagonalized by the orthonormal
DST-I in every mode, so

    (-Lap_h - mu) u = f   <=>   u_hat[i,j,k] = f_hat[i,j,k] / (eta_i + eta_j + eta_k - mu)

The sine transform acts on factors only; the division is done by cross
approximation on the transformed tensor.
"""
from __future__ import annotations

import numpy as np
import scipy.fft

from . import tucker
from .cross import TuckerOracle, cross
from .tucker import Grid, TuckerTensor


def laplace_eigenvalues(n: int, h: float) -> np.ndarray:
    """Eigenvalues of the 1-d Dirichlet second-difference operator -D2."""
    k = np.arange(1, n + 1)
    return (2.0 / h**2) * (1.0 - np.cos(np.pi * k / (n + 1)))


def sine_transform(F: np.ndarray) -> np.ndarray:
    """Orthonormal DST-I along axis 0 (an involution)."""
    return scipy.fft.dst(F, type=1, norm="ortho", axis=0)


class ShiftedLaplacian:
    """The operator ``-Lap_h - shift`` on ``grid``."""

    def __init__(self, grid: Grid, shift: float = 0.0):
        self.grid = grid
        self.shift = float(shift)
        self.eta = laplace_eigenvalues(grid.n, grid.h)
        gap = 3.0 * self.eta[0] - self.shift
        if not gap > 0:
            raise ValueError(
                f"indefinite operator: shift {self.shift:.6g} >= smallest "
                f"eigenvalue {3.0 * self.eta[0]:.6g}"
            )

    def symbol(self, i, j, k):
        return self.eta[i] + self.eta[j] + self.eta[k] - self.shift


def solve(op: ShiftedLaplacian, rhs: TuckerTensor, eps: float, seed: int = 0,
          return_report: bool = False):
    """Solve ``(-Lap_h - shift) u = rhs`` for a Tucker right-hand side."""
    if rhs.shape != (op.grid.n,) * 3:
        raise ValueError(f"rhs shape {rhs.shape} does not match the grid")
    if tucker.norm(rhs) == 0.0:
        out = tucker.zeros(rhs.shape)
        return (out, None) if return_report else out
    rhs = rhs._orthogonal
    hat = TuckerTensor(rhs.core, [sine_transform(f) for f in rhs.factors])
    oracle = TuckerOracle([hat], lambda v, idx: v[0] / op.symbol(*idx))
    sol_hat, report = cross(oracle, eps / 3.0, max_rank=op.grid.n, seed=seed)
    out = TuckerTensor(sol_hat.core, [sine_transform(f) for f in sol_hat.factors])
    return (out, report) if return_report else out


def second_difference(n: int, h: float) -> np.ndarray:
    """Dense 1-d Dirichlet second-difference matrix D2 (negative definite)."""
    D = np.diag(np.full(n, -2.0)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)
    return D / h**2


def _d2(F: np.ndarray, h: float) -> np.ndarray:
    out = -2.0 * F
    out[1:] += F[:-1]
    out[:-1] += F[1:]
    return out / h**2


def apply_laplacian(grid: Grid, u: TuckerTensor, eps: float | None = None) -> TuckerTensor:
    """7-point Laplacian ``Lap_h u`` (zero ghost values), exact with doubled
    ranks unless ``eps`` asks for rounding."""
    h = grid.h
    r1, r2, r3 = u.ranks
    core = np.zeros((2 * r1, 2 * r2, 2 * r3))
    core[r1:, :r2, :r3] = u.core
    core[:r1, r2:, :r3] = u.core
    core[:r1, :r2, r3:] = u.core
    factors = [np.hstack([f, _d2(f, h)]) for f in u.factors]
    out = TuckerTensor(core, factors)
    return tucker.round(out, eps) if eps is not None else out
