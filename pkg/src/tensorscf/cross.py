"""Tucker cross approximation from element evaluations.

The tensor is never formed.  Each sweep evaluates a few mode fibers through
the current index sets, takes their column spaces as factors, picks new
index sets with maxvol and interpolates the core from the sampled block::

    A ~ A[I1, I2, I3] x_1 U U[I1]^-1 x_2 V V[I2]^-1 x_3 W W[I3]^-1

Iteration stops once two successive approximations agree to ``eps``, the
residual on all evaluated fibers is below ``eps`` and a random validation
sample confirms the estimated Frobenius error.

Ranks grow through pivots: the largest residual entries on the fibers of
one sweep seed extra fibers in the next.  The element budget per sweep is
``sum_m n * P_m + r1*r2*r3`` with ``P_m <= r_m + max(2, r/4) + 2`` fibers,
plus ``100*r`` validation points at the end, so for ``s`` sweeps the total
stays below ``BUDGET_CONSTANT * (r^3 + 3*n*r)`` with
``BUDGET_CONSTANT = 2*MAX_SWEEPS``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import tucker
from .tucker import TuckerTensor, mode_product

log = logging.getLogger(__name__)

MAX_SWEEPS = 12
N_RANDOM_FIBERS = 2
BUDGET_CONSTANT = 2 * MAX_SWEEPS


class ElementOracle:
    """Tensor given only through an element callback.

    ``func(i, j, k)`` must accept broadcastable integer arrays and return
    the matching array of values.  Subclasses may override :meth:`fibers`
    and :meth:`block` with cheaper structured evaluations.
    """

    def __init__(self, shape, func=None):
        self.shape = tuple(int(n) for n in shape)
        self._func = func

    def values(self, i, j, k) -> np.ndarray:
        return np.asarray(self._func(i, j, k), dtype=float)

    def block(self, i, j, k) -> np.ndarray:
        i, j, k = (np.asarray(x, dtype=int) for x in (i, j, k))
        out = self.values(i[:, None, None], j[None, :, None], k[None, None, :])
        return np.broadcast_to(out, (i.size, j.size, k.size))

    def fibers(self, mode: int, ia, ib) -> np.ndarray:
        ia, ib = np.asarray(ia, dtype=int), np.asarray(ib, dtype=int)
        line = np.arange(self.shape[mode])[:, None]
        idx = [None, None, None]
        others = [m for m in range(3) if m != mode]
        idx[mode] = line
        idx[others[0]] = ia[None, :]
        idx[others[1]] = ib[None, :]
        out = self.values(*idx)
        return np.broadcast_to(out, (self.shape[mode], ia.size))

    def points(self, i, j, k) -> np.ndarray:
        return np.broadcast_to(self.values(i, j, k), np.shape(i))

    def init_indices(self):
        return None


class TuckerOracle(ElementOracle):
    """Elementwise function of one or more Tucker tensors.

    ``combine(vals, idx)`` receives the list of input values (all of the same
    broadcast shape) and the index arrays that produced them.
    """

    def __init__(self, tensors, combine):
        tensors = list(tensors)
        shape = tensors[0].shape
        if any(t.shape != shape for t in tensors):
            raise ValueError("all inputs of a Tucker oracle must share a shape")
        super().__init__(shape)
        self.tensors = tensors
        self.combine = combine

    def values(self, i, j, k):
        i, j, k = np.broadcast_arrays(i, j, k)
        flat = [t.at(i.ravel(), j.ravel(), k.ravel()).reshape(i.shape) for t in self.tensors]
        return self.combine(flat, (i, j, k))

    def block(self, i, j, k):
        i, j, k = (np.asarray(x, dtype=int) for x in (i, j, k))
        vals = [t.block(i, j, k) for t in self.tensors]
        return np.asarray(
            self.combine(vals, (i[:, None, None], j[None, :, None], k[None, None, :])),
            dtype=float,
        )

    def fibers(self, mode, ia, ib):
        ia, ib = np.asarray(ia, dtype=int), np.asarray(ib, dtype=int)
        vals = [t.fibers(mode, ia, ib) for t in self.tensors]
        idx = [None, None, None]
        others = [m for m in range(3) if m != mode]
        idx[mode] = np.arange(self.shape[mode])[:, None]
        idx[others[0]] = ia[None, :]
        idx[others[1]] = ib[None, :]
        out = np.asarray(self.combine(vals, tuple(idx)), dtype=float)
        return np.broadcast_to(out, (self.shape[mode], ia.size))

    def init_indices(self, cap: int = 48):
        sets = []
        rmax = max(max(t.ranks) for t in self.tensors)
        for m in range(3):
            F = np.hstack([t._orthogonal.factors[m] for t in self.tensors])
            Q, s, _ = np.linalg.svd(F, full_matrices=False)
            r = int(np.sum(s > 1e-10 * s[0])) if s[0] > 0 else 1
            r = max(1, min(r, cap, 2 * rmax + 2, self.shape[m]))
            sets.append(maxvol(Q[:, :r]))
        return sets


@dataclass
class CrossReport:
    converged: bool = False
    ranks: tuple = (0, 0, 0)
    evaluations: int = 0
    sweeps: int = 0
    residual_estimate: float = float("nan")
    sweep_differences: list = field(default_factory=list)
    clamped: int = 0

    @property
    def budget_ratio(self) -> float:
        """evaluations / (r^3 + 3 n r) for the final maximal rank r."""
        r = max(self.ranks) if self.ranks else 1
        return self.evaluations / max(1.0, r**3 + 3 * self._n * r)

    _n: int = 1


def maxvol(A: np.ndarray, tol: float = 1.05, max_iters: int = 200) -> np.ndarray:
    """Row indices of a dominant r x r submatrix of a tall n x r matrix."""
    A = np.asarray(A, dtype=float)
    n, r = A.shape
    if r == 0:
        return np.zeros(0, dtype=int)
    if r >= n:
        return np.arange(n)
    _, _, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    idx = np.array(piv[:r])
    try:
        B = np.linalg.solve(A[idx].T, A.T).T
    except np.linalg.LinAlgError:
        return np.sort(idx)
    for _ in range(max_iters):
        i, j = np.unravel_index(np.argmax(np.abs(B)), B.shape)
        if abs(B[i, j]) <= tol:
            break
        # Sherman-Morrison update for swapping row idx[j] -> i.
        bj = B[:, j].copy()
        bi = B[i].copy()
        bi[j] -= 1.0
        B -= np.outer(bj, bi / B[i, j])
        idx[j] = i
    return np.sort(idx)


def _orth(C: np.ndarray, tol: float, max_rank: int):
    """Orthonormal basis of range(C) truncated at relative Frobenius ``tol``."""
    nrm = np.linalg.norm(C)
    if nrm == 0.0:
        return None
    U, s, _ = np.linalg.svd(C, full_matrices=False)
    r = tucker._truncation_rank(s, tol * nrm)
    return U[:, : min(r, max_rank)]


def _check_finite(vals, locate):
    """Raise with the tensor index of the first non-finite sample."""
    vals = np.asarray(vals)
    if not np.all(np.isfinite(vals)):
        pos = tuple(int(x) for x in np.argwhere(~np.isfinite(vals))[0])
        idx = tuple(int(x) for x in locate(pos))
        raise ValueError(f"oracle returned {vals[pos]} at index {idx}")


def _block_locator(I):
    return lambda pos: (I[0][pos[0]], I[1][pos[1]], I[2][pos[2]])


def _fiber_locator(mode, ia, ib):
    def locate(pos):
        idx = [0, 0, 0]
        a, b = [x for x in range(3) if x != mode]
        idx[mode], idx[a], idx[b] = pos[0], ia[pos[1]], ib[pos[1]]
        return idx

    return locate


def cross(
    oracle: ElementOracle,
    eps: float,
    max_rank: int = 128,
    seed: int = 0,
    init=None,
    max_sweeps: int = MAX_SWEEPS,
    round_result: bool = True,
):
    """Tucker approximation of ``oracle`` with relative accuracy ``eps``.

    Returns ``(tensor, report)``.  When the rank cap or the sweep limit is
    hit before the stopping criteria hold, the best approximation so far is
    returned with ``report.converged = False``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    shape = oracle.shape
    rng = np.random.default_rng(seed)
    report = CrossReport()
    report._n = max(shape)
    inner_tol = eps / 100.0

    if init is None:
        init = oracle.init_indices()
    if init is None:
        init = [rng.choice(n, size=min(n, 4), replace=False) for n in shape]
        init = [np.union1d(I, [n // 2]) for I, n in zip(init, shape)]
    I = [np.unique(np.asarray(x, dtype=int)) for x in init]

    B = np.asarray(oracle.block(*I), dtype=float)
    _check_finite(B, _block_locator(I))
    report.evaluations += B.size

    prev = None
    approx = None
    pivots = np.zeros((0, 3), dtype=int)
    for sweep in range(max_sweeps):
        report.sweeps = sweep + 1
        Qs, fibers = [], []
        for m in range(3):
            a, b = [x for x in range(3) if x != m]
            Bm = tucker.unfold(B, m)
            rm = len(I[m])
            if Bm.shape[1] <= rm:
                cols = np.arange(Bm.shape[1])
            else:
                _, _, piv = scipy.linalg.qr(Bm, mode="economic", pivoting=True)
                cols = np.asarray(piv[:rm])
            ia = np.concatenate([I[a][cols // len(I[b])], pivots[:, a],
                                 rng.integers(0, shape[a], N_RANDOM_FIBERS)])
            ib = np.concatenate([I[b][cols % len(I[b])], pivots[:, b],
                                 rng.integers(0, shape[b], N_RANDOM_FIBERS)])
            C = np.asarray(oracle.fibers(m, ia, ib), dtype=float)
            _check_finite(C, _fiber_locator(m, ia, ib))
            report.evaluations += C.size
            Q = _orth(C, inner_tol, max_rank)
            if Q is None:
                Q = np.zeros((shape[m], 1))
                Q[I[m][0], 0] = 1.0
            Qs.append(Q)
            fibers.append((C, ia, ib))

        I = [maxvol(Q) for Q in Qs]
        B = np.asarray(oracle.block(*I), dtype=float)
        _check_finite(B, _block_locator(I))
        report.evaluations += B.size
        core = B
        for m in range(3):
            core = mode_product(core, np.linalg.inv(Qs[m][I[m]]), m)
        approx = TuckerTensor(core, Qs)

        nrm = tucker.norm(approx)
        if prev is None:
            diff = np.inf
        elif nrm == 0.0:
            diff = 0.0 if tucker.norm(prev) == 0.0 else np.inf
        else:
            diff = tucker.norm(approx - prev) / nrm
        report.sweep_differences.append(float(diff))
        prev = approx

        # Residual on the fibers already evaluated: free error indicator and
        # source of new pivots for the next sweep.
        pivots, fiber_res = _fiber_pivots(approx, fibers, max(2, max(approx.ranks) // 4))
        at_cap = any(q.shape[1] >= max_rank for q in Qs)

        if diff < eps and fiber_res < eps:
            res = _validate(oracle, approx, rng, report)
            report.residual_estimate = res
            if res <= eps:
                report.converged = not at_cap or max_rank >= max(shape)
                break
        if at_cap and diff < eps:
            break

    if not report.converged:
        log.warning(
            "cross did not converge: ranks %s after %d sweeps (last difference %.2e)",
            approx.ranks, report.sweeps, report.sweep_differences[-1],
        )
    out = tucker.round(approx, eps / 2.0) if round_result else approx
    report.ranks = out.ranks
    return out, report


def _fiber_pivots(approx, fibers, k):
    """Largest residual entries on evaluated fibers as index triples, and the
    relative Frobenius residual over all of them."""
    cand, vals = [], []
    num = den = 0.0
    for m, (C, ia, ib) in enumerate(fibers):
        R = C - approx.fibers(m, ia, ib)
        num += float(np.sum(R**2))
        den += float(np.sum(C**2))
        flat = np.abs(R).ravel()
        top = np.argsort(flat)[::-1][:k]
        a, b = [x for x in range(3) if x != m]
        for t in top:
            p, q = np.unravel_index(t, R.shape)
            idx = [0, 0, 0]
            idx[m], idx[a], idx[b] = p, ia[q], ib[q]
            cand.append(idx)
            vals.append(flat[t])
    order = np.argsort(vals)[::-1][:k]
    piv = np.unique(np.asarray(cand, dtype=int)[order].reshape(-1, 3), axis=0)
    rel = np.sqrt(num / den) if den > 0 else 0.0
    return piv, rel


def _validate(oracle, approx, rng, report) -> float:
    """Estimated relative Frobenius error from random element samples."""
    n_samples = 100 * max(approx.ranks)
    idx = [rng.integers(0, n, n_samples) for n in oracle.shape]
    exact = np.asarray(oracle.points(*idx), dtype=float)
    _check_finite(exact, lambda pos: (idx[0][pos[0]], idx[1][pos[0]], idx[2][pos[0]]))
    report.evaluations += n_samples
    err = exact - approx.at(*idx)
    total = float(np.prod(oracle.shape, dtype=float))
    est = np.sqrt(total * np.mean(err**2))
    nrm = tucker.norm(approx)
    if nrm == 0.0:
        return 0.0 if est == 0.0 else np.inf
    return est / nrm


def hadamard(a: TuckerTensor, b: TuckerTensor, eps: float, return_report=False, **kw):
    """Elementwise product through cross approximation."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    t, report = cross(TuckerOracle([a, b], lambda v, idx: v[0] * v[1]), eps, **kw)
    return (t, report) if return_report else t


def map_elementwise(a: TuckerTensor, f, eps: float, domain=None, return_report=False, **kw):
    """Cross approximation of ``f(a)`` applied elementwise.

    ``domain=(lo, hi)`` clips input samples into the valid range of ``f``
    first (e.g. ``(0, inf)`` for fractional powers of a density); the number
    of clipped samples is reported.
    """
    counter = [0]

    def combine(vals, idx):
        x = vals[0]
        if domain is not None:
            lo, hi = domain
            bad = (x < lo) | (x > hi)
            if np.any(bad):
                counter[0] += int(np.count_nonzero(bad))
                x = np.clip(x, lo, hi)
        return f(x)

    t, report = cross(TuckerOracle([a], combine), eps, **kw)
    report.clamped = counter[0]
    return (t, report) if return_report else t
