"""Tucker-format tensors on uniform cubic grids.

A :class:`TuckerTensor` stores a 3-way array as a small core contracted with
three factor matrices::

    a[i, j, k] = sum_{abc} core[a, b, c] * U[i, a] * V[j, b] * W[k, c]

All tolerances are relative to the Frobenius norm of the tensor being
approximated.  Instances are treated as immutable values: every operation
returns a new tensor and never writes into the arrays of its arguments.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

# Above this many elements the dense twins refuse to run.
DENSE_LIMIT = 32**3 * 8


@dataclass(frozen=True)
class Grid:
    """Uniform tensor-product grid on the cube [-L, L]^3 with n cells per mode.

    ``nodes`` are the raw lattice points ``-L + k*h``; ``centers`` are the
    cell midpoints ``-L + (k + 1/2)*h`` which the solver uses throughout.
    """

    half_width: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"grid needs at least 2 points per mode, got {self.n}")
        if not self.half_width > 0:
            raise ValueError(f"half_width must be positive, got {self.half_width}")

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.n

    @property
    def nodes(self) -> np.ndarray:
        return -self.half_width + self.h * np.arange(self.n)

    @property
    def centers(self) -> np.ndarray:
        return -self.half_width + self.h * (np.arange(self.n) + 0.5)

    @property
    def volume_element(self) -> float:
        return self.h**3


class TuckerTensor:
    """Rank-(r1, r2, r3) Tucker representation of an n1 x n2 x n3 array."""

    def __init__(self, core, factors):
        core = np.asarray(core, dtype=float)
        factors = tuple(np.asarray(f, dtype=float) for f in factors)
        if core.ndim != 3 or len(factors) != 3:
            raise ValueError("Tucker tensor needs a 3-way core and three factors")
        for m, f in enumerate(factors):
            if f.ndim != 2 or f.shape[1] != core.shape[m]:
                raise ValueError(
                    f"factor {m} has shape {f.shape}, core mode size is {core.shape[m]}"
                )
        self.core = core
        self.factors = factors

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def ranks(self) -> tuple[int, int, int]:
        return self.core.shape

    def __repr__(self):
        return f"TuckerTensor(shape={self.shape}, ranks={self.ranks})"

    # element access -------------------------------------------------------

    def full(self) -> np.ndarray:
        """Dense reconstruction (desk-scale only)."""
        if np.prod(self.shape, dtype=float) > DENSE_LIMIT:
            raise MemoryError(f"refusing to densify a tensor of shape {self.shape}")
        U, V, W = self.factors
        return np.einsum("abc,ia,jb,kc->ijk", self.core, U, V, W, optimize=True)

    def block(self, i, j, k) -> np.ndarray:
        """Sub-array ``a[np.ix_(i, j, k)]``."""
        U, V, W = self.factors
        t = np.tensordot(U[np.asarray(i)], self.core, axes=(1, 0))
        t = np.tensordot(t, V[np.asarray(j)], axes=(1, 1))
        t = np.tensordot(t, W[np.asarray(k)], axes=(1, 1))
        return t

    def at(self, i, j, k) -> np.ndarray:
        """Elements at index triples (equal-length 1-d arrays)."""
        U, V, W = self.factors
        i, j, k = (np.asarray(x, dtype=int) for x in (i, j, k))
        gw = np.einsum("abc,pc->pab", self.core, W[k])
        gvw = np.einsum("pab,pb->pa", gw, V[j])
        return np.einsum("pa,pa->p", gvw, U[i])

    def fibers(self, mode: int, ia, ib) -> np.ndarray:
        """Mode-``mode`` fibers through the index pairs (ia, ib) of the other
        two modes (in increasing mode order).  Returns an (n_mode, P) array."""
        others = [m for m in range(3) if m != mode]
        Fa = self.factors[others[0]][np.asarray(ia, dtype=int)]
        Fb = self.factors[others[1]][np.asarray(ib, dtype=int)]
        g = np.moveaxis(self.core, mode, 0)
        coef = np.einsum("abc,pb,pc->ap", g, Fa, Fb, optimize=True)
        return self.factors[mode] @ coef

    # algebra ----------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    @cached_property
    def _orthogonal(self) -> "TuckerTensor":
        return orthogonalize(self)

    def norm(self) -> float:
        return norm(self)

    def total(self) -> float:
        """Sum of all elements."""
        U, V, W = self.factors
        return float(
            np.einsum("abc,a,b,c->", self.core, U.sum(0), V.sum(0), W.sum(0), optimize=True)
        )


def zeros(shape) -> TuckerTensor:
    return TuckerTensor(np.zeros((1, 1, 1)), [np.zeros((n, 1)) for n in shape])


def rank_one(u, v, w, weight: float = 1.0) -> TuckerTensor:
    return TuckerTensor(
        np.full((1, 1, 1), float(weight)),
        [np.asarray(x, dtype=float).reshape(-1, 1) for x in (u, v, w)],
    )


def from_cp(weights, factors) -> TuckerTensor:
    """Tucker tensor with a superdiagonal core from a CP decomposition
    ``sum_m weights[m] * U[:, m] (x) V[:, m] (x) W[:, m]``."""
    weights = np.asarray(weights, dtype=float)
    M = weights.size
    core = np.zeros((M, M, M))
    core[np.arange(M), np.arange(M), np.arange(M)] = weights
    return TuckerTensor(core, factors)


def cp_to_tucker(weights, factors, eps: float, max_rank=None) -> TuckerTensor:
    """Compressed Tucker form of a (possibly long) CP sum.

    Each factor matrix is scaled by the signed cube root of the weights and
    replaced by its dominant left singular vectors (cut far below ``eps``),
    the projected superdiagonal core is summed up directly and the result is
    rounded to ``eps``.
    """
    weights = np.asarray(weights, dtype=float)
    c = np.cbrt(weights)
    projected, bases = [], []
    for f in factors:
        f = np.asarray(f, dtype=float) * c
        P, s, _ = np.linalg.svd(f, full_matrices=False)
        if s.size == 0 or s[0] == 0.0:
            return zeros(tuple(np.shape(g)[0] for g in factors))
        r = max(1, int(np.sum(s > 1e-3 * eps * s[0])))
        P = P[:, :r]
        bases.append(P)
        projected.append(P.T @ f)
    core = np.einsum("pm,qm,sm->pqs", *projected, optimize=True)
    return round(TuckerTensor(core, bases), eps, max_rank)


def mode_product(core: np.ndarray, mat: np.ndarray, mode: int) -> np.ndarray:
    """core x_mode mat, i.e. contract ``mat``'s columns with axis ``mode``."""
    out = np.tensordot(mat, core, axes=(1, mode))
    return np.moveaxis(out, 0, mode)


def unfold(a: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(a, mode, 0).reshape(a.shape[mode], -1)


def _truncation_rank(s: np.ndarray, tol: float) -> int:
    """Smallest r with sqrt(sum_{i>=r} s_i^2) <= tol (at least 1)."""
    tail = np.sqrt(np.cumsum((s**2)[::-1]))[::-1]
    keep = np.nonzero(tail > tol)[0]
    return max(1, int(keep[-1]) + 1 if keep.size else 1)


def _hosvd(a: np.ndarray, tol_per_mode: float, max_rank=None):
    """Sequentially truncated HOSVD of a small dense 3-way array.

    Returns (core, [P1, P2, P3]) with orthonormal P's such that
    ``a ~ core x_m P_m`` and the squared error is at most 3*tol_per_mode^2.
    """
    core = a
    mats = []
    for m in range(3):
        P, s, _ = np.linalg.svd(unfold(core, m), full_matrices=False)
        r = _truncation_rank(s, tol_per_mode)
        if max_rank is not None:
            r = min(r, max_rank)
        P = P[:, :r]
        core = mode_product(core, P.T, m)
        mats.append(P)
    return core, mats


def from_dense(a: np.ndarray, eps: float, max_rank=None) -> TuckerTensor:
    """Truncated HOSVD of a dense array with relative accuracy ``eps``."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 3:
        raise ValueError("expected a 3-way array")
    if not np.all(np.isfinite(a)):
        raise ValueError("array contains non-finite values")
    nrm = np.linalg.norm(a)
    if nrm == 0.0:
        return zeros(a.shape)
    core, mats = _hosvd(a, eps * nrm / np.sqrt(3.0), max_rank)
    return TuckerTensor(core, mats)


def orthogonalize(t: TuckerTensor) -> TuckerTensor:
    """Same tensor with orthonormal factor columns (QR per mode)."""
    core = t.core
    qs = []
    for m, f in enumerate(t.factors):
        q, r = np.linalg.qr(f)
        core = mode_product(core, r, m)
        qs.append(q)
    return TuckerTensor(core, qs)


def round(t: TuckerTensor, eps: float, max_rank=None) -> TuckerTensor:
    """SVD-based recompression: QR of the factors then HOSVD of the small
    core, truncating each mode at ``eps/sqrt(3)`` of the norm."""
    o = t._orthogonal
    nrm = np.linalg.norm(o.core)
    if nrm == 0.0 or not np.isfinite(nrm):
        if not np.isfinite(nrm):
            raise FloatingPointError("non-finite Tucker core")
        return zeros(t.shape)
    core, mats = _hosvd(o.core, eps * nrm / np.sqrt(3.0), max_rank)
    return TuckerTensor(core, [f @ p for f, p in zip(o.factors, mats)])


def add(a: TuckerTensor, b: TuckerTensor) -> TuckerTensor:
    """Exact sum; ranks add up."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ra, rb = a.ranks, b.ranks
    core = np.zeros(tuple(x + y for x, y in zip(ra, rb)))
    core[: ra[0], : ra[1], : ra[2]] = a.core
    core[ra[0]:, ra[1]:, ra[2]:] = b.core
    factors = [np.hstack([fa, fb]) for fa, fb in zip(a.factors, b.factors)]
    return TuckerTensor(core, factors)


def linear_combination(coeffs, tensors) -> TuckerTensor:
    """Exact ``sum_i coeffs[i] * tensors[i]`` as one Tucker tensor."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("empty combination")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ValueError("shape mismatch in linear combination")
    ranks = np.array([t.ranks for t in tensors])
    offs = np.vstack([np.zeros(3, int), np.cumsum(ranks, axis=0)])
    core = np.zeros(tuple(offs[-1]))
    for c, t, o0, o1 in zip(coeffs, tensors, offs[:-1], offs[1:]):
        core[o0[0]:o1[0], o0[1]:o1[1], o0[2]:o1[2]] = c * t.core
    factors = [np.hstack([t.factors[m] for t in tensors]) for m in range(3)]
    return TuckerTensor(core, factors)


def rounded_combination(coeffs, tensors, eps: float, rank_limit: int = 160) -> TuckerTensor:
    """``sum_i coeffs[i] * tensors[i]`` rounded to relative accuracy ``eps``.

    Terms are merged in one go while the stacked ranks stay below
    ``rank_limit``; longer sums are accumulated with intermediate rounding
    at ``eps / len(tensors)`` so the core never gets large.
    """
    tensors = list(tensors)
    coeffs = list(coeffs)
    if max(sum(t.ranks[m] for t in tensors) for m in range(3)) <= rank_limit:
        return round(linear_combination(coeffs, tensors), eps)
    step = eps / len(tensors)
    acc = scale(tensors[0], coeffs[0])
    for c, t in zip(coeffs[1:], tensors[1:]):
        acc = round(add(acc, scale(t, c)), step)
    return round(acc, eps)


def scale(a: TuckerTensor, c: float) -> TuckerTensor:
    return TuckerTensor(float(c) * a.core, a.factors)


def inner(a: TuckerTensor, b: TuckerTensor) -> float:
    """Frobenius inner product through factor Gram matrices."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    core = b.core
    for m in range(3):
        core = mode_product(core, a.factors[m].T @ b.factors[m], m)
    return float(np.vdot(a.core, core))


def norm(a: TuckerTensor) -> float:
    return float(np.linalg.norm(a._orthogonal.core))


def hadamard_exact(a: TuckerTensor, b: TuckerTensor) -> TuckerTensor:
    """Exact elementwise product with ranks multiplied (Khatri-Rao factors).

    Only sensible for small ranks; general products go through cross
    approximation."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    factors = [
        (fa[:, :, None] * fb[:, None, :]).reshape(fa.shape[0], -1)
        for fa, fb in zip(a.factors, b.factors)
    ]
    core = np.einsum("abc,ABC->aAbBcC", a.core, b.core).reshape(
        tuple(x * y for x, y in zip(a.ranks, b.ranks))
    )
    return TuckerTensor(core, factors)


def apply_matrices(t: TuckerTensor, mats) -> TuckerTensor:
    """``t x_1 M1 x_2 M2 x_3 M3`` applied to the factors (``None`` = identity)."""
    return TuckerTensor(
        t.core, [f if m is None else m @ f for f, m in zip(t.factors, mats)]
    )


# debug dump ---------------------------------------------------------------
#
# npz layout: "shape" int64[3], "ranks" int64[3], "core" float64[r1*r2*r3]
# (C order), "factor0".."factor2" float64[n_m*r_m] (C order, row = grid index).
# The JSON layout holds the same keys with nested lists.


def save(t: TuckerTensor, path) -> None:
    path = Path(path)
    payload = {
        "shape": np.array(t.shape),
        "ranks": np.array(t.ranks),
        "core": t.core.ravel(),
    }
    for m, f in enumerate(t.factors):
        payload[f"factor{m}"] = f.ravel()
    if path.suffix == ".json":
        path.write_text(json.dumps({k: v.tolist() for k, v in payload.items()}))
    else:
        with open(path, "wb") as fh:
            np.savez(fh, **payload)


def load(path) -> TuckerTensor:
    path = Path(path)
    if path.suffix == ".json":
        d = {k: np.asarray(v) for k, v in json.loads(path.read_text()).items()}
    else:
        with np.load(path) as z:
            d = {k: z[k] for k in z.files}
    shape, ranks = d["shape"].astype(int), d["ranks"].astype(int)
    core = d["core"].astype(float).reshape(ranks)
    factors = [d[f"factor{m}"].astype(float).reshape(shape[m], ranks[m]) for m in range(3)]
    return TuckerTensor(core, factors)
