"""Block-Green self-consistent field iteration for closed-shell Hartree-Fock
and Kohn-Sham LDA on a uniform grid.

Orbitals are grid functions in Tucker format normalized with the discrete
inner product ``h^3 * sum(a * b)``.  One iteration:

1. Green step: ``phi_hat_i = -2 (-Lap_h - 2 lambda_i)^-1 V phi_i``.
2. Cholesky orthogonalization of the candidates.
3. New density (with Pulay mixing) and new potential ``V'``.
4. Fock matrix from values already at hand, without any derivative::

       F = Phi~^T V' Phi~ - Phi~^T V Phi L^-T + L^-1 Phi_hat^T Phi_hat Lambda L^-T

5. Rotation of the orbitals onto the eigenvectors of ``F``.

Because the Green step solves the same 7-point equation whose operator
appears in the kinetic energy, the formula equals ``Phi~^T (-Lap_h/2 + V')
Phi~`` exactly.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import convolution, poisson, tucker, xc
from .cross import TuckerOracle, cross
from .tucker import Grid, TuckerTensor

log = logging.getLogger(__name__)

LAMBDA_CAP = -0.05
BOX_CONSTANT = 0.55
MODES = ("hf", "lda")
# Pulay depth 1 is simple mixing; deeper histories are available but were
# slower on every system tried, since the Green map is not a function of rho alone.
MIX_DEPTH = 1
MIX_BETA = 0.7
PULAY_MAX_COND = 1e6
PULAY_MAX_COEFF = 5.0


@dataclass(frozen=True)
class Molecule:
    """Nuclear charges and positions (bohr) with ``n_occ`` occupied orbitals,
    each holding ``occupation`` electrons (2 for closed shells, 1 for a
    single electron)."""

    charges: tuple
    positions: np.ndarray
    n_occ: int
    occupation: float = 2.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "charges", tuple(float(z) for z in self.charges))
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "positions", pos)
        if len(self.charges) != pos.shape[0] or not self.charges:
            raise ValueError("need one position per nuclear charge")
        if any(z <= 0 for z in self.charges):
            raise ValueError("nuclear charges must be positive")
        if self.n_occ < 1:
            raise ValueError("at least one occupied orbital is required")
        if self.n_electrons > sum(self.charges) + 1e-12:
            raise ValueError("more electrons than nuclear charge")

    @classmethod
    def neutral(cls, charges, positions, name: str = "") -> "Molecule":
        total = sum(charges)
        if abs(total - round(total)) > 1e-12 or round(total) % 2:
            raise ValueError(f"closed-shell neutral system needs an even electron count, got {total}")
        return cls(charges, positions, int(round(total)) // 2, 2.0, name)

    @property
    def n_electrons(self) -> float:
        return self.occupation * self.n_occ

    def nuclear_repulsion(self) -> float:
        e = 0.0
        for a in range(len(self.charges)):
            for b in range(a):
                e += self.charges[a] * self.charges[b] / np.linalg.norm(self.positions[a] - self.positions[b])
        return e


@dataclass
class SCFState:
    orbitals: list
    energies: np.ndarray
    density: TuckerTensor
    v_coul: TuckerTensor
    iteration: int = 0
    history: list = field(default_factory=list)
    v_orbitals: list | None = None


@dataclass
class FockMatrix:
    matrix: np.ndarray
    asymmetry: float = 0.0


@dataclass
class EnergyReport:
    total: float
    orbital_energies: np.ndarray
    homo: float
    nuclear_repulsion: float
    components: dict
    trace: list = field(default_factory=list)
    ranks: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    n: int = 0
    seconds: float = 0.0
    state: SCFState | None = None


@dataclass
class Operators:
    """Everything the iteration needs besides the state."""

    grid: Grid
    mode: str
    kernel: convolution.ConvolutionKernel
    v_ext: TuckerTensor
    eps: float
    occupation: float = 2.0
    seed: int = 0

    @property
    def h3(self) -> float:
        return self.grid.h**3

    @property
    def tol(self) -> float:
        """Working accuracy of intermediate tensor operations."""
        return self.eps / 10.0


def build_operators(mol: Molecule, grid: Grid, mode: str, eps: float, seed: int = 0,
                    kernel=None, cache_dir=None) -> Operators:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if kernel is None:
        kernel = convolution.build_newton_kernel(grid, eps / 10.0, cache_dir=cache_dir)
    v_ext = convolution.external_potential(mol, grid, eps / 10.0)
    return Operators(grid, mode, kernel, v_ext, eps, mol.occupation, seed)


def box_heuristic(homo: float, eps: float, C: float = BOX_CONSTANT) -> float:
    """Half-width ``L = C ln(1/eps) / sqrt(-2 homo)`` so that the orbital tail
    cut by the zero boundary is of order ``eps`` in the energy."""
    if homo >= 0:
        raise ValueError("HOMO energy must be negative")
    return C * np.log(1.0 / eps) / np.sqrt(-2.0 * homo)


# -- potentials ---------------------------------------------------------------

def density(orbitals, occupation: float, eps: float, seed: int = 0) -> TuckerTensor:
    """``occupation * sum_i phi_i^2`` by cross approximation."""
    occ = float(occupation)
    oracle = TuckerOracle(orbitals, lambda v, idx: occ * sum(x * x for x in v))
    rho, _ = cross(oracle, eps, seed=seed)
    return rho


def electron_count(rho: TuckerTensor, grid: Grid) -> float:
    return grid.h**3 * rho.total()


def exchange_potentials(orbitals, phi: TuckerTensor, kernel, eps: float, seed: int = 0):
    """``W_j = int phi_j(r') phi(r') / |r - r'| dr'`` for every orbital j."""
    out = []
    for pj in orbitals:
        prod, _ = cross(TuckerOracle([pj, phi], lambda v, idx: v[0] * v[1]), eps, seed=seed)
        out.append(convolution.coulomb_potential(prod, kernel, eps))
    return out


def apply_potential_hf(state: SCFState, kernel, v_ext: TuckerTensor, phi: TuckerTensor,
                       eps: float, seed: int = 0) -> TuckerTensor:
    """``(V_ext + V_coul) phi - sum_j phi_j W_j`` in one cross call."""
    W = exchange_potentials(state.orbitals, phi, kernel, eps, seed)
    N = len(state.orbitals)

    def combine(v, idx):
        ve, vc, p = v[0], v[1], v[2]
        orb, ex = v[3:3 + N], v[3 + N:]
        return (ve + vc) * p - sum(a * b for a, b in zip(orb, ex))

    t, _ = cross(TuckerOracle([v_ext, state.v_coul, phi, *state.orbitals, *W], combine),
                 eps, seed=seed)
    return t


def apply_potential_ks(state: SCFState, kernel, v_ext: TuckerTensor, phi: TuckerTensor,
                       eps: float, seed: int = 0) -> TuckerTensor:
    """``(V_ext + V_coul + v_xc(rho)) phi`` in one cross call; negative
    density samples are clamped to zero and counted in the log."""
    clamped = [0]

    def combine(v, idx):
        ve, vc, rho, p = v
        neg = rho < 0
        if np.any(neg):
            clamped[0] += int(np.count_nonzero(neg))
            rho = np.where(neg, 0.0, rho)
        return (ve + vc + xc.lda_potential(rho)) * p

    t, _ = cross(TuckerOracle([v_ext, state.v_coul, state.density, phi], combine),
                 eps, seed=seed)
    if clamped[0]:
        log.debug("clamped %d negative density samples", clamped[0])
    return t


def apply_potential(state: SCFState, ops: Operators, phi: TuckerTensor) -> TuckerTensor:
    f = apply_potential_hf if ops.mode == "hf" else apply_potential_ks
    return f(state, ops.kernel, ops.v_ext, phi, ops.tol, ops.seed)


# -- the iteration ------------------------------------------------------------

def green_step(state: SCFState, ops: Operators, eps: float | None = None):
    """Candidate orbitals ``-2 (-Lap_h - 2 lambda_i)^-1 (V phi_i)``.

    Returns ``(phi_hat, lambdas)`` where ``lambdas`` are the shifts actually
    used (non-negative estimates are replaced by ``LAMBDA_CAP``).
    """
    eps = ops.tol if eps is None else eps
    lam = np.array(state.energies, dtype=float)
    for i in np.nonzero(lam >= 0)[0]:
        log.warning("orbital %d energy %.3g is not negative; using %.2f", i, lam[i], LAMBDA_CAP)
        lam[i] = LAMBDA_CAP
    hat = []
    for vphi, li in zip(state.v_orbitals, lam):
        op = poisson.ShiftedLaplacian(ops.grid, 2.0 * li)
        hat.append(tucker.scale(poisson.solve(op, vphi, eps, seed=ops.seed), -2.0))
    return hat, lam


def gram(a, b, h3: float) -> np.ndarray:
    return h3 * np.array([[tucker.inner(x, y) for y in b] for x in a])


class OrbitalCollapse(np.linalg.LinAlgError):
    """Gram matrix of the candidate orbitals is not positive definite."""

    def __init__(self, gram_matrix):
        super().__init__(f"Gram matrix is not positive definite:\n{gram_matrix}")
        self.gram = gram_matrix


def orthogonalize(hat, h3: float, eps: float):
    """``Phi~ = Phi_hat L^-T`` with ``L L^T`` the Gram matrix of ``Phi_hat``."""
    G = gram(hat, hat, h3)
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise OrbitalCollapse(G) from None
    Linv = np.linalg.inv(L)
    if len(hat) == 1:
        return [tucker.round(tucker.scale(hat[0], Linv[0, 0]), eps)], L
    tilde = [tucker.rounded_combination(Linv[i], hat, eps) for i in range(len(hat))]
    return tilde, L


def fock_matrix(tilde, hat, phi, v_phi, v_tilde, L, lam, h3: float) -> FockMatrix:
    """Derivative-free Fock matrix of the orthogonalized candidates."""
    Linv = np.linalg.inv(L)
    LinvT = Linv.T
    F = (gram(tilde, v_tilde, h3)
         - gram(tilde, v_phi, h3) @ LinvT
         + Linv @ gram(hat, hat, h3) @ np.diag(lam) @ LinvT)
    nrm = np.linalg.norm(F)
    asym = float(np.linalg.norm(F - F.T) / nrm) if nrm > 0 else 0.0
    return FockMatrix(0.5 * (F + F.T), asym)


def rotate(tilde, F: FockMatrix, eps: float):
    """Eigen-rotation ``Phi = Phi~ S``; returns (orbitals, energies, S)."""
    lam, S = np.linalg.eigh(F.matrix)
    # deterministic column signs: largest component positive
    S = S * np.sign(S[np.argmax(np.abs(S), axis=0), np.arange(S.shape[1])])
    return rotate_tensors(tilde, S, eps), lam, S


def rotate_tensors(tensors, S: np.ndarray, eps: float):
    if len(tensors) == 1:
        return [tucker.round(tucker.scale(tensors[0], S[0, 0]), eps)]
    return [tucker.rounded_combination(S[:, i], tensors, eps) for i in range(S.shape[1])]


def _dot(a, b):
    if isinstance(a, TuckerTensor):
        return tucker.inner(a, b)
    return float(np.dot(np.ravel(a), np.ravel(b)))


def _combine(coeffs, items, eps):
    if isinstance(items[0], TuckerTensor):
        return tucker.rounded_combination(coeffs, items, eps)
    return sum(c * x for c, x in zip(coeffs, items))


def mix_density(history, rho_in, rho_out, m: int = MIX_DEPTH, beta: float = MIX_BETA,
                eps: float = 0.0):
    """Pulay (DIIS) mixing of densities.

    ``history`` holds earlier ``(rho_in, residual)`` pairs.  The coefficients
    minimize the norm of the combined residual under ``sum(alpha) = 1``,
    solved as a bordered linear system.  The history restarts whenever the
    residual norm grows, and old entries are dropped while that
    system is ill-conditioned; if only one entry survives, or the
    coefficients blow up, the step falls back to simple mixing
    ``(1 - beta) rho_in + beta rho_out``.

    Works on Tucker tensors or plain arrays.  Returns
    ``(rho_next, new_history, used_fallback)``.
    """
    if isinstance(rho_in, TuckerTensor):
        res = tucker.round(tucker.add(rho_out, tucker.scale(rho_in, -1.0)), eps)
    else:
        res = np.asarray(rho_out) - np.asarray(rho_in)
    hist = list(history)
    if hist and _dot(res, res) > _dot(hist[-1][1], hist[-1][1]):
        # the residual grew: the linear model behind the history is stale
        hist = []
    hist = (hist + [(rho_in, res)])[-max(1, m):]
    B = np.array([[_dot(a[1], b[1]) for b in hist] for a in hist])
    alpha = None
    # drop the oldest entries while the bordered system is ill-conditioned
    while len(hist) > 1:
        k = len(hist)
        Bk = B[-k:, -k:]
        scale = np.max(np.abs(np.diag(Bk)))
        if scale == 0:
            break
        A = np.zeros((k + 1, k + 1))
        A[:k, :k] = Bk / scale
        A[:k, k] = A[k, :k] = 1.0
        if np.linalg.cond(A) < PULAY_MAX_COND:
            rhs = np.zeros(k + 1)
            rhs[k] = 1.0
            alpha = np.linalg.solve(A, rhs)[:k]
            break
        hist = hist[1:]
    if alpha is not None and np.max(np.abs(alpha)) > PULAY_MAX_COEFF:
        alpha = None
    if alpha is None:
        fallback = len(B) > 1
        nxt = _combine([1.0 - beta, beta], [rho_in, rho_out], eps)
        if fallback:
            hist = hist[-1:]
        return nxt, hist, fallback
    log.debug("pulay coefficients %s", alpha)
    items = [x for pair in hist for x in pair]
    coeffs = [c for a in alpha for c in (a, beta * a)]
    return _combine(coeffs, items, eps), hist, False


def total_energy(state: SCFState, kernel, mode: str, mol: Molecule, eps: float,
                 seed: int = 0) -> EnergyReport:
    """Total energy from orbital energies and double-counting corrections.

    HF:  ``occ*sum(lam) - J/2 + (occ/2) sum_ij K_ij + E_nn``
    LDA: ``occ*sum(lam) - J/2 + E_xc - int rho v_xc + E_nn``
    with ``J = int rho V_coul``.
    """
    h3 = kernel.grid.h**3
    occ = mol.occupation
    lam = np.asarray(state.energies, dtype=float)
    rho = density(state.orbitals, occ, eps, seed)
    v_coul = convolution.coulomb_potential(rho, kernel, eps)
    J = h3 * tucker.inner(rho, v_coul)
    e_nn = mol.nuclear_repulsion()
    comp = {"orbital_sum": float(occ * lam.sum()), "coulomb": float(J),
            "nuclear_repulsion": float(e_nn)}
    E = occ * lam.sum() - 0.5 * J + e_nn
    if mode == "hf":
        K = 0.0
        for i, pi in enumerate(state.orbitals):
            for j, pj in enumerate(state.orbitals):
                if j < i:
                    continue
                prod, _ = cross(TuckerOracle([pi, pj], lambda v, idx: v[0] * v[1]), eps, seed=seed)
                w = convolution.coulomb_potential(prod, kernel, eps)
                kij = h3 * tucker.inner(prod, w)
                K += kij if i == j else 2.0 * kij
        comp["exchange"] = float(K)
        E += 0.5 * occ * K
    else:
        def exc_density(v, idx):
            r = np.maximum(v[0], 0.0)
            return r * xc.lda_energy_density(r)

        def vxc_density(v, idx):
            r = np.maximum(v[0], 0.0)
            return r * xc.lda_potential(r)

        exc, _ = cross(TuckerOracle([rho], exc_density), eps, seed=seed)
        vrho, _ = cross(TuckerOracle([rho], vxc_density), eps, seed=seed)
        Exc = h3 * exc.total()
        Vxc = h3 * vrho.total()
        comp["xc_energy"] = float(Exc)
        comp["xc_potential"] = float(Vxc)
        E += Exc - Vxc
    return EnergyReport(
        total=float(E), orbital_energies=lam.copy(), homo=float(lam.max()),
        nuclear_repulsion=float(e_nn), components=comp,
        ranks=[o.ranks for o in state.orbitals],
    )


# -- initial guess ------------------------------------------------------------

def _gaussian_basis(mol: Molecule, grid: Grid):
    """Even-tempered s (and p for Z >= 5) Gaussians on every nucleus as
    separable 1-d factor triples."""
    x = grid.centers
    cap = 0.5 / grid.h**2
    basis = []
    for Z, R in zip(mol.charges, mol.positions):
        exps = [min(2.0 * Z**2 * 0.25**k, cap) for k in range(7)]
        exps = sorted(set(np.round(exps, 12)), reverse=True)
        exps = [a for a in exps if a > 0.01]
        g = [[np.exp(-a * (x - R[m]) ** 2) for m in range(3)] for a in exps]
        basis.extend(g)
        if Z >= 5:
            for a in exps[1:]:
                for m in range(3):
                    f = [np.exp(-a * (x - R[q]) ** 2) for q in range(3)]
                    f[m] = f[m] * (x - R[m])
                    basis.append(f)
    return basis


def initial_guess(mol: Molecule, ops: Operators):
    """Orbitals from the core Hamiltonian ``-Lap_h/2 + V_ext`` in a small
    Gaussian basis.  Returns (orbitals, coefficients-free kinetic
    expectation values)."""
    grid, h3 = ops.grid, ops.h3
    basis = _gaussian_basis(mol, grid)
    n = len(basis)
    D2 = poisson.second_difference(grid.n, grid.h)
    S = np.ones((n, n))
    T = np.zeros((n, n))
    V = np.zeros((n, n))
    for a in range(n):
        for b in range(a, n):
            s1 = [basis[a][m] @ basis[b][m] for m in range(3)]
            d1 = [basis[a][m] @ D2 @ basis[b][m] for m in range(3)]
            S[a, b] = h3 * np.prod(s1)
            T[a, b] = -0.5 * h3 * (d1[0] * s1[1] * s1[2] + s1[0] * d1[1] * s1[2] + s1[0] * s1[1] * d1[2])
            prod = tucker.rank_one(*[basis[a][m] * basis[b][m] for m in range(3)])
            V[a, b] = h3 * tucker.inner(ops.v_ext, prod)
            S[b, a], T[b, a], V[b, a] = S[a, b], T[a, b], V[a, b]
    # canonical orthogonalization drops near-dependent combinations
    s, U = np.linalg.eigh(S)
    keep = s > 1e-10 * s.max()
    X = U[:, keep] / np.sqrt(s[keep])
    e, C = np.linalg.eigh(X.T @ (T + V) @ X)
    C = X @ C[:, : mol.n_occ]
    orbitals, kinetic = [], []
    for i in range(mol.n_occ):
        terms = [tucker.rank_one(*f) for f in basis]
        orbitals.append(tucker.rounded_combination(C[:, i], terms, ops.tol))
        kinetic.append(float(C[:, i] @ T @ C[:, i]))
    return orbitals, np.array(kinetic)


def _prepare(state_orbitals, lam, mol, ops, mix_history=None):
    rho = density(state_orbitals, mol.occupation, ops.tol, ops.seed)
    v_coul = convolution.coulomb_potential(rho, ops.kernel, ops.tol)
    st = SCFState(list(state_orbitals), np.asarray(lam, dtype=float), rho, v_coul,
                  history=list(mix_history or []))
    st.v_orbitals = [apply_potential(st, ops, p) for p in st.orbitals]
    return st


def initial_state(mol: Molecule, ops: Operators, orbitals=None, energies=None) -> SCFState:
    """Starting state from the core-Hamiltonian guess or from given orbitals.

    Without energies, each lambda is the Rayleigh quotient of the full
    initial Hamiltonian, capped below ``LAMBDA_CAP``.
    """
    kinetic = None
    if orbitals is None:
        orbitals, kinetic = initial_guess(mol, ops)
    st = _prepare(orbitals, np.zeros(len(orbitals)), mol, ops)
    if energies is None:
        lam = []
        for i, (p, vp) in enumerate(zip(st.orbitals, st.v_orbitals)):
            nrm = ops.h3 * tucker.inner(p, p)
            if kinetic is not None:
                t = kinetic[i]
            else:
                t = -0.5 * ops.h3 * tucker.inner(p, poisson.apply_laplacian(ops.grid, p))
            lam.append((t + ops.h3 * tucker.inner(p, vp)) / nrm)
        energies = np.minimum(np.array(lam), LAMBDA_CAP)
    st.energies = np.sort(np.asarray(energies, dtype=float))
    return st


def scf_iteration(state: SCFState, mol: Molecule, ops: Operators, mix_depth: int = MIX_DEPTH,
                  mix_beta: float = MIX_BETA):
    """One Block-Green iteration; returns (new_state, fock)."""
    tol = ops.tol
    hat, lam = green_step(state, ops)
    tilde, L = orthogonalize(hat, ops.h3, tol)
    rho_out = density(tilde, mol.occupation, tol, ops.seed)
    rho, hist, _ = mix_density(state.history, state.density, rho_out, mix_depth, mix_beta, tol)
    v_coul = convolution.coulomb_potential(rho, ops.kernel, tol)
    mid = SCFState(tilde, lam, rho, v_coul, state.iteration, hist)
    v_tilde = [apply_potential(mid, ops, p) for p in tilde]
    F = fock_matrix(tilde, hat, state.orbitals, state.v_orbitals, v_tilde, L, lam, ops.h3)
    orbitals, energies, S = rotate(tilde, F, tol)
    new = SCFState(orbitals, energies, rho, v_coul, state.iteration + 1, hist)
    new.v_orbitals = rotate_tensors(v_tilde, S, tol)
    return new, F


def scf_solve(mol: Molecule, grid: Grid, mode: str, eps: float, max_iter: int = 60,
              mix_depth: int = MIX_DEPTH, mix_beta: float = MIX_BETA, seed: int = 0, ops: Operators | None = None,
              initial: SCFState | None = None, cache_dir=None) -> EnergyReport:
    """Run the Block-Green iteration until the largest relative change of the
    orbital energies drops below ``eps`` (or ``max_iter`` is reached)."""
    if not 1e-12 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-12, 1e-3], got {eps}")
    t0 = time.perf_counter()
    if ops is None:
        ops = build_operators(mol, grid, mode, eps, seed, cache_dir=cache_dir)
    if initial is None:
        state = initial_state(mol, ops)
    else:
        state = initial_state(mol, ops, initial.orbitals, initial.energies)
    trace = []
    converged = False
    for it in range(1, max_iter + 1):
        prev = state.energies
        state, F = scf_iteration(state, mol, ops, mix_depth, mix_beta)
        rel = np.abs(state.energies - prev) / np.abs(state.energies)
        for i, (l, r, o) in enumerate(zip(state.energies, rel, state.orbitals)):
            trace.append({"iter": it, "orbital": i, "lambda": float(l),
                          "rel_change": float(r), "ranks": tuple(o.ranks)})
        log.info("n=%d iter %d lambda %s max rel change %.2e asym %.1e electrons %.6f",
                 grid.n, it, np.array2string(state.energies, precision=8), rel.max(),
                 F.asymmetry, electron_count(state.density, grid))
        if rel.max() < eps:
            converged = True
            break
    report = total_energy(state, ops.kernel, ops.mode, mol, ops.tol, ops.seed)
    report.trace = trace
    report.converged = converged
    report.iterations = state.iteration
    report.n = grid.n
    report.state = state
    report.seconds = time.perf_counter() - t0
    if not converged:
        log.warning("SCF not converged after %d iterations on n=%d", max_iter, grid.n)
    return report
