"""Grid ladders and Aitken extrapolation of energies.

On grids n, 2n, 4n, ... with a fixed box the energies behave like
``E_n = E* + C h_n^2 + ...``, a geometric sequence in the level index, which
the Aitken delta-squared process removes exactly::

    E'_n = E_{n+2} - (E_{n+2} - E_{n+1})^2 / (E_{n+2} - 2 E_{n+1} + E_n)
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import scf
from .tucker import Grid, TuckerTensor

log = logging.getLogger(__name__)

GUARD = 1e-14


def aitken_pass(E):
    """One Aitken pass; returns ``None`` when a denominator falls below
    ``GUARD * |E_{n+2}|``."""
    E = np.asarray(E, dtype=float)
    if E.size < 3:
        return None
    d1 = E[1:-1] - E[:-2]
    d2 = E[2:] - E[1:-1]
    den = d2 - d1
    if np.any(np.abs(den) < GUARD * np.abs(E[2:])):
        return None
    return E[2:] - d2**2 / den


def aitken_table(E, depth: int | None = None) -> list[np.ndarray]:
    """The original sequence followed by successive Aitken levels.

    The default depth is ``min(2, (len(E) - 1) // 2)``; recursion stops
    early when the denominator guard triggers.
    """
    levels = [np.asarray(E, dtype=float)]
    if depth is None:
        depth = min(2, (len(levels[0]) - 1) // 2)
    for _ in range(depth):
        nxt = aitken_pass(levels[-1])
        if nxt is None:
            break
        levels.append(nxt)
    return levels


def aitken(E, depth: int | None = None) -> np.ndarray:
    """Deepest accelerated sequence (the input itself if no pass applies)."""
    return aitken_table(E, depth)[-1]


def extrapolate(E, depth: int | None = None) -> float:
    """Extrapolated limit: last entry of the deepest Aitken level."""
    return float(aitken(E, depth)[-1])


def empirical_order(E) -> float:
    """Observed convergence order ``log2(dE_prev / dE_last)`` from the last
    three levels of a halving ladder."""
    E = np.asarray(E, dtype=float)
    if E.size < 3:
        return float("nan")
    a, b = E[-2] - E[-3], E[-1] - E[-2]
    if a == 0 or b == 0 or a / b <= 0:
        return float("nan")
    return float(np.log2(a / b))


def prolongate(t: TuckerTensor, L: float, n_new: int) -> TuckerTensor:
    """Linear interpolation of every factor onto a finer cell-centered grid,
    with zero values on the ghost points just outside the box."""
    out = []
    x_new = Grid(L, n_new).centers
    for f in t.factors:
        n = f.shape[0]
        g = Grid(L, n)
        x = np.concatenate([[-L - g.h / 2], g.centers, [L + g.h / 2]])
        F = np.vstack([np.zeros((1, f.shape[1])), f, np.zeros((1, f.shape[1]))])
        out.append(np.column_stack([np.interp(x_new, x, F[:, c]) for c in range(F.shape[1])]))
    return TuckerTensor(t.core, out)


@dataclass
class GridLadder:
    sizes: list
    half_width: float
    reports: list = field(default_factory=list)
    seconds: float = 0.0

    def __post_init__(self):
        sizes = [int(n) for n in self.sizes]
        if not sizes:
            raise ValueError("empty grid ladder")
        for n in sizes:
            if n < 2 or n & (n - 1):
                raise ValueError(f"grid sizes must be powers of two, got {n}")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"grid sizes must increase, got {sizes}")
        self.sizes = sizes

    @property
    def energies(self) -> list:
        return [r.total for r in self.reports]

    @property
    def homos(self) -> list:
        return [r.homo for r in self.reports]

    @property
    def complete(self) -> bool:
        return len(self.reports) == len(self.sizes) and all(r.converged for r in self.reports)

    @property
    def extrapolated_energy(self) -> float:
        return extrapolate(self.energies) if self.reports else float("nan")

    @property
    def extrapolated_homo(self) -> float:
        return extrapolate(self.homos) if self.reports else float("nan")

    @property
    def order(self) -> float:
        return empirical_order(self.energies)

    def rows(self) -> list[dict]:
        return [{"n": r.n, "E": r.total, "homo": r.homo, "iters": r.iterations,
                 "max_rank": max(max(x) for x in r.ranks), "seconds": r.seconds}
                for r in self.reports]


def run_ladder(mol: scf.Molecule, ladder: GridLadder, mode: str, eps: float,
               max_iter: int = 60, mix_depth: int = scf.MIX_DEPTH,
               mix_beta: float = scf.MIX_BETA, seed: int = 0, cache_dir=None,
               progress=None) -> GridLadder:
    """Solve on each grid of the ladder, warm-starting from the previous level.

    Stops at the first level that does not converge; the partial ladder is
    returned.
    """
    t0 = time.perf_counter()
    prev = None
    for n in ladder.sizes:
        grid = Grid(ladder.half_width, n)
        initial = None
        if prev is not None:
            orbs = [prolongate(p, ladder.half_width, n) for p in prev.state.orbitals]
            initial = scf.SCFState(orbs, prev.state.energies, None, None)
        rep = scf.scf_solve(mol, grid, mode, eps, max_iter, mix_depth, mix_beta, seed,
                            initial=initial, cache_dir=cache_dir)
        ladder.reports.append(rep)
        log.info("level n=%d E=%.8f homo=%.8f iters=%d %.1fs", n, rep.total, rep.homo,
                 rep.iterations, rep.seconds)
        if progress is not None:
            progress(rep)
        if not rep.converged:
            log.warning("ladder halted: level n=%d did not converge", n)
            break
        prev = rep
    ladder.seconds = time.perf_counter() - t0
    return ladder
