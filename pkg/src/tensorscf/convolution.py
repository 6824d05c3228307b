"""Newton-kernel convolution on uniform grids.

The Galerkin coefficients of ``1/|r - r'|`` for piecewise-constant cell
functions,

    q_d = int_{cell_0} int_{cell_d} dr dr' / |r - r'|,

are assembled from an exponential (Gaussian) sum for ``1/rho``.  Every term
factorizes into three 1-d cell-pair integrals, so the kernel is a CP sum that
is then compressed to Tucker format.  With ``f`` sampled at cell centers the
discrete convolution ``w_i = sum_j f_j q_{i-j}`` approximates
``h^3 * int f(r') / |r_i - r'| dr'``.

Cached kernels live in ``<cache_dir>/newton_n{n}_L{L}_eps{eps}.npz`` with
arrays ``core``, ``factor0..2``, ``nodes``, ``weights`` and ``meta``
(``[L, n, eps, delta]``).
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal
import scipy.special

from . import tucker
from .tucker import Grid, TuckerTensor

log = logging.getLogger(__name__)

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


@dataclass(frozen=True)
class ExpSum:
    """``1/rho ~ sum_m weights[m] * exp(-nodes[m]**2 * rho**2)`` on ``interval``."""

    nodes: np.ndarray
    weights: np.ndarray
    interval: tuple[float, float]
    accuracy: float

    def __call__(self, rho):
        rho = np.asarray(rho, dtype=float)
        return np.exp(-np.multiply.outer(rho**2, self.nodes**2)) @ self.weights

    def __len__(self):
        return self.nodes.size


def exp_sum(eps: float, delta: float, R: float, refinements: int = 6) -> ExpSum:
    """Sinc quadrature of ``1/rho = 2/sqrt(pi) int exp(-rho^2 e^{2s} + s) ds``
    with maximal relative error ``eps`` on ``[delta, R]``.

    Truncation points come from the two tails of the integral and the step
    from the width of the strip of analyticity; the result is checked on a
    dense log-spaced sample and the step is refined if needed.
    """
    if not (eps > 0 and 0 < delta < R):
        raise ValueError(f"need eps > 0 and 0 < delta < R, got {eps}, {delta}, {R}")
    s_min = np.log(eps * np.sqrt(np.pi) / (8.0 * R))
    s_max = np.log(scipy.special.erfcinv(eps / 4.0) / delta)
    hs = np.pi**2 / (2.0 * np.log(4.0 / eps))
    rho = np.geomspace(delta, R, 4000)
    err = np.inf
    for _ in range(refinements):
        s = np.arange(s_min, s_max + hs, hs)
        t = np.exp(s)
        w = (2.0 / np.sqrt(np.pi)) * hs * t
        es = ExpSum(t, w, (delta, R), np.inf)
        err = float(np.max(np.abs(es(rho) * rho - 1.0)))
        if err <= eps:
            return ExpSum(t, w, (delta, R), err)
        hs *= 0.8
        s_min -= 0.5
        s_max += 0.1
    raise RuntimeError(
        f"exponential sum reached relative accuracy {err:.3e}, requested {eps:.3e}"
    )


def _g_closed(z):
    """G(z) with G'' = exp(-z^2), G(0) = 1/2."""
    return 0.5 * np.sqrt(np.pi) * z * scipy.special.erf(z) + 0.5 * np.exp(-z * z)


def _g_tail(z):
    """G(z) - sqrt(pi)/2 * z for z >= 0, free of the linear growth."""
    return np.exp(-z * z) * (0.5 - 0.5 * np.sqrt(np.pi) * z * scipy.special.erfcx(z))


def pair_integrals(t: np.ndarray, h: float, dmax: int) -> np.ndarray:
    """``F[d, m] = int_0^h int_0^h exp(-t_m^2 (x - x' + d h)^2) dx dx'``.

    Equivalently ``int_{-h}^{h} (h - |u|) exp(-t^2 (u + a)^2) du`` with
    ``a = d h``.  Wide Gaussians (``t h <= 2``) use composite Gauss-Legendre
    with enough panels to resolve the variation across a cell; narrow ones
    use the closed form, written through the tail function when ``a >= h``
    to avoid cancellation.
    """
    t = np.asarray(t, dtype=float)
    d = np.arange(dmax + 1)
    a = d * h
    F = np.zeros((dmax + 1, t.size))
    for m, tm in enumerate(t):
        th = tm * h
        if th <= 2.0:
            # terms with exp(-t^2 (a-h)^2) below exp(-40^2) vanish in double
            rel = d <= 1 + 40.0 / th
            ar = a[rel]
            rate = 2.0 * th * (tm * ar.max()) + th * th
            panels = int(np.ceil(rate / 4.0)) + 1
            edges = np.linspace(0.0, h, panels + 1)
            u = (edges[:-1, None] + np.diff(edges)[:, None] * _GL_X).ravel()
            wq = (np.diff(edges)[:, None] * _GL_W).ravel() * (h - u)
            vals = np.exp(-(tm * (ar[:, None] + u)) ** 2) + np.exp(-(tm * (ar[:, None] - u)) ** 2)
            F[rel, m] = vals @ wq
        else:
            z = tm * a
            out = np.empty_like(z)
            out[0] = 2.0 * _g_closed(th) - 1.0
            zz = z[1:]
            out[1:] = _g_tail(zz + th) + _g_tail(zz - th) - 2.0 * _g_tail(zz)
            F[:, m] = np.maximum(out, 0.0) / tm**2
    return F


@dataclass(frozen=True)
class ConvolutionKernel:
    """Galerkin Newton kernel on the difference range ``-(n-1)..(n-1)``."""

    grid: Grid
    galerkin_tensor: TuckerTensor
    nodes: np.ndarray
    weights: np.ndarray
    eps: float
    delta: float

    def value(self, d1: int, d2: int, d3: int) -> float:
        """q at integer cell offset ``(d1, d2, d3)``."""
        c = self.grid.n - 1
        return float(self.galerkin_tensor.at([d1 + c], [d2 + c], [d3 + c])[0])


def _cache_path(cache_dir, grid: Grid, eps: float) -> Path:
    return Path(cache_dir) / f"newton_n{grid.n}_L{grid.half_width:.12g}_eps{eps:.3e}.npz"


def _load_cached(path: Path, grid: Grid, eps: float):
    try:
        with np.load(path) as z:
            meta = z["meta"]
            if not np.allclose(meta, [grid.half_width, grid.n, eps, meta[3]], rtol=1e-14):
                return None
            t = TuckerTensor(z["core"], [z[f"factor{m}"] for m in range(3)])
            return ConvolutionKernel(grid, t, z["nodes"], z["weights"], eps, float(meta[3]))
    except (OSError, KeyError, ValueError) as exc:
        log.warning("ignoring unreadable kernel cache %s (%s)", path, exc)
        return None


def _store(path: Path, k: ConvolutionKernel) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    t = k.galerkin_tensor
    with open(tmp, "wb") as fh:
        np.savez(fh, core=t.core, factor0=t.factors[0], factor1=t.factors[1],
                 factor2=t.factors[2], nodes=k.nodes, weights=k.weights,
                 meta=np.array([k.grid.half_width, k.grid.n, k.eps, k.delta]))
    os.replace(tmp, path)


def build_newton_kernel(grid: Grid, eps: float, cache_dir=None) -> ConvolutionKernel:
    """Galerkin tensor of ``1/|r - r'|`` with relative accuracy about ``eps``.

    The exponential sum is accurate to ``eps/4`` on ``[delta, sqrt(3)*2L]``
    where ``delta = h*sqrt(eps)/4`` keeps the missed near-singular part of
    the self-cell integral below ``eps/4``; compression takes the rest.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if cache_dir is not None:
        path = _cache_path(cache_dir, grid, eps)
        if path.exists():
            k = _load_cached(path, grid, eps)
            if k is not None:
                return k
    n, h = grid.n, grid.h
    delta = h * np.sqrt(eps) / 4.0
    es = exp_sum(eps / 4.0, delta, np.sqrt(3.0) * 2.0 * grid.half_width)
    F = pair_integrals(es.nodes, h, n - 1)
    F = np.vstack([F[:0:-1], F])
    t = tucker.cp_to_tucker(es.weights, [F, F, F], eps / 2.0)
    k = ConvolutionKernel(grid, t, es.nodes, es.weights, eps, delta)
    log.debug("Newton kernel n=%d: %d exponentials, ranks %s", n, len(es), t.ranks)
    if cache_dir is not None:
        _store(path, k)
    return k


def _factor_convolutions(U: np.ndarray, A: np.ndarray, n: int) -> np.ndarray:
    """``X[i, alpha, a] = sum_j U[j, alpha] A[i - j + n - 1, a]``."""
    full = scipy.signal.fftconvolve(U[:, :, None], A[:, None, :], axes=0)
    return full[n - 1:2 * n - 1]


def _weighted_basis(X: np.ndarray, Cm: np.ndarray, Gm: np.ndarray, tol: float) -> np.ndarray:
    """Dominant left singular vectors of ``X_(m) (C_(m) kron G_(m))``."""
    Ec, sc, _ = np.linalg.svd(Cm, full_matrices=False)
    Eg, sg, _ = np.linalg.svd(Gm, full_matrices=False)
    Y = np.einsum("iab,ax,by->ixy", X, Ec * sc, Eg * sg, optimize=True)
    Y = Y.reshape(X.shape[0], -1)
    P, s, _ = np.linalg.svd(Y, full_matrices=False)
    r = tucker._truncation_rank(s, tol * np.linalg.norm(s))
    return P[:, :r]


def conv(kernel: ConvolutionKernel, f: TuckerTensor, eps: float) -> TuckerTensor:
    """Discrete convolution ``w_i = sum_j f_j q_{i-j}`` in Tucker format.

    Factor columns are convolved in 1-d by FFT.  For each mode a basis of the
    result's column space is taken from the factor convolutions weighted by
    the singular values of both cores, the Kronecker-structured core is
    projected onto it by a chain of small contractions, and the result is
    rounded to ``eps/2``.
    """
    n = kernel.grid.n
    if f.shape != (n, n, n):
        raise ValueError(f"input shape {f.shape} does not match kernel grid n={n}")
    if tucker.norm(f) == 0.0:
        return tucker.zeros(f.shape)
    f = f._orthogonal
    K = kernel.galerkin_tensor
    C, G = f.core, K.core
    Ps, Ms = [], []
    for m in range(3):
        X = _factor_convolutions(f.factors[m], K.factors[m], n)
        P = _weighted_basis(X, tucker.unfold(C, m), tucker.unfold(G, m), 1e-2 * eps)
        Ps.append(P)
        Ms.append(np.tensordot(P, X, axes=(0, 0)))
    M1, M2, M3 = Ms
    T = np.tensordot(M1, C, axes=(1, 0))           # p, a, beta, gamma
    T = np.tensordot(T, M2, axes=(2, 1))           # p, a, gamma, q, b
    T = np.tensordot(T, G, axes=([1, 4], [0, 1]))  # p, gamma, q, c
    T = np.tensordot(T, M3, axes=([1, 3], [1, 2]))  # p, q, s
    return tucker.round(TuckerTensor(T, Ps), eps / 2.0)


def coulomb_potential(rho: TuckerTensor, kernel: ConvolutionKernel, eps: float) -> TuckerTensor:
    """``V(r_i) ~ int rho(r') / |r_i - r'| dr'`` on the kernel's grid."""
    return tucker.scale(conv(kernel, rho, eps), 1.0 / kernel.grid.h**3)


def external_potential(mol, grid: Grid, eps: float) -> TuckerTensor:
    """``-sum_a Z_a / |r - R_a|`` at the cell centers.

    Built from an exponential sum accurate to ``eps`` on
    ``[h/10, sqrt(3)*2L]``; a nucleus closer than ``h/10`` to a grid point
    gives the finite value of the sum there instead of a singular sample.
    """
    charges = np.asarray(mol.charges, dtype=float)
    positions = np.asarray(mol.positions, dtype=float).reshape(-1, 3)
    L = grid.half_width
    if np.any(np.abs(positions) >= L):
        raise ValueError("all nuclei must lie inside the box")
    es = exp_sum(eps, grid.h / 10.0, np.sqrt(3.0) * 2.0 * L)
    x = grid.centers
    for R in positions:
        gap = np.sqrt(sum(np.min(np.abs(x - R[m])) ** 2 for m in range(3)))
        if gap < grid.h / 10.0:
            log.warning("nucleus at %s lies %.2g bohr from a cell center (h = %.3g); the "
                        "potential there is capped and the energy will be poor", R, gap, grid.h)
    weights, factors = [], [[], [], []]
    for Z, R in zip(charges, positions):
        weights.append(-Z * es.weights)
        for m in range(3):
            factors[m].append(np.exp(-np.multiply.outer((x - R[m]) ** 2, es.nodes**2)))
    return tucker.cp_to_tucker(np.concatenate(weights),
                               [np.hstack(f) for f in factors], eps)
