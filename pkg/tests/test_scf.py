import logging

import numpy as np
import pytest

from tensorscf import poisson, scf, tucker
from tensorscf.cross import ElementOracle, cross
from tensorscf.tucker import Grid

from conftest import random_fock_case, rel_err, smooth_tucker

HYDROGEN = scf.Molecule([1.0], [[0.0, 0.0, 0.0]], 1, 1.0, "H")


def _hydrogen_state(n, L=8.0, eps=1e-6):
    g = Grid(L, n)
    x = g.centers
    ops = scf.build_operators(HYDROGEN, g, "hf", eps)
    f = lambda i, j, k: np.exp(-np.sqrt(x[i] ** 2 + x[j] ** 2 + x[k] ** 2))
    phi, _ = cross(ElementOracle((n,) * 3, f), 1e-9)
    phi = tucker.scale(phi, 1 / np.sqrt(ops.h3 * tucker.inner(phi, phi)))
    return ops, phi, scf._prepare([phi], [-0.5], HYDROGEN, ops)


# -- molecule -----------------------------------------------------------------

def test_molecule_validation():
    with pytest.raises(ValueError):
        scf.Molecule([1.0, 1.0], [[0, 0, 0]], 1)
    with pytest.raises(ValueError):
        scf.Molecule([-1.0], [[0, 0, 0]], 1)
    with pytest.raises(ValueError):
        scf.Molecule([1.0], [[0, 0, 0]], 1, 2.0)
    with pytest.raises(ValueError):
        scf.Molecule.neutral([1.0, 2.0], [[0, 0, 0], [1, 0, 0]])
    be = scf.Molecule.neutral([4.0], [[0, 0, 0]])
    assert be.n_occ == 2 and be.n_electrons == 4


def test_nuclear_repulsion():
    mol = scf.Molecule.neutral([1.0, 1.0, 2.0], [[0, 0, 0], [1.4, 0, 0], [0, 3, 4]])
    expected = 1 / 1.4 + 2 / 5 + 2 / np.hypot(np.hypot(1.4, 3), 4)
    assert abs(mol.nuclear_repulsion() - expected) < 1e-15


def test_box_heuristic():
    assert abs(scf.box_heuristic(-0.5, 1e-6) - 0.55 * np.log(1e6)) < 1e-12
    with pytest.raises(ValueError):
        scf.box_heuristic(0.1, 1e-6)


# -- Fock matrix --------------------------------------------------------------

def test_fock_matrix_equals_explicit_laplacian(rng):
    g = Grid(3.0, 24)
    for _ in range(3):
        F, dense = random_fock_case(rng, g)
        assert rel_err(F.matrix, dense) < 1e-8
        assert F.asymmetry < 1e-8


def test_fock_single_orbital_reduces_to_scalar(rng):
    """For N = 1 the matrix is <phi~, V' phi~> - (<phi~, V phi> - lam |hat|^2) / |hat|^2 scaled."""
    g = Grid(3.0, 24)
    F, dense = random_fock_case(rng, g, n_orb=1)
    assert F.matrix.shape == (1, 1)
    assert abs(F.matrix[0, 0] - dense[0, 0]) < 1e-10 * abs(dense[0, 0])


# -- orthogonalization and rotation -------------------------------------------

def test_orthogonalize_makes_orthonormal(rng):
    g = Grid(3.0, 20)
    hat = [smooth_tucker(rng, g, (2, 2, 2)) for _ in range(3)]
    tilde, L = scf.orthogonalize(hat, g.h**3, 1e-12)
    G = scf.gram(tilde, tilde, g.h**3)
    assert np.abs(G - np.eye(3)).max() < 1e-10
    dense = np.column_stack([h.full().ravel() for h in hat])
    q = dense @ np.linalg.inv(L).T
    assert rel_err(np.column_stack([t.full().ravel() for t in tilde]), q) < 1e-10


def test_orthogonalize_already_orthonormal(rng):
    g = Grid(3.0, 20)
    hat = [smooth_tucker(rng, g, (2, 2, 2)) for _ in range(2)]
    tilde, _ = scf.orthogonalize(hat, g.h**3, 1e-13)
    again, L = scf.orthogonalize(tilde, g.h**3, 1e-13)
    assert np.abs(L - np.eye(2)).max() < 1e-10
    assert rel_err(again[1].full(), tilde[1].full()) < 1e-10


def test_orthogonalize_detects_collapse(rng):
    g = Grid(3.0, 16)
    a = smooth_tucker(rng, g, (2, 2, 2))
    with pytest.raises(scf.OrbitalCollapse) as info:
        scf.orthogonalize([a, a], g.h**3, 1e-10)
    assert info.value.gram.shape == (2, 2)


def test_rotate_diagonalizes(rng):
    g = Grid(3.0, 16)
    hat = [smooth_tucker(rng, g, (2, 2, 2)) for _ in range(3)]
    tilde, _ = scf.orthogonalize(hat, g.h**3, 1e-13)
    M = rng.standard_normal((3, 3))
    F = scf.FockMatrix(M + M.T)
    orbs, lam, S = scf.rotate(tilde, F, 1e-13)
    assert np.all(np.diff(lam) >= 0)
    assert np.allclose(S.T @ F.matrix @ S, np.diag(lam), atol=1e-12)
    assert np.abs(scf.gram(orbs, orbs, g.h**3) - np.eye(3)).max() < 1e-10
    # deterministic signs: the largest entry of each column is positive
    assert np.all(S[np.argmax(np.abs(S), axis=0), np.arange(3)] > 0)


# -- mixing -------------------------------------------------------------------

def test_mixing_depth_one_is_simple_mixing(rng):
    a, b = rng.standard_normal(50), rng.standard_normal(50)
    nxt, hist, fallback = scf.mix_density([], a, b, m=1, beta=0.3)
    assert np.allclose(nxt, 0.7 * a + 0.3 * b)
    assert not fallback and len(hist) == 1


def test_mixing_identical_residuals_falls_back(rng):
    a, r = rng.standard_normal(30), rng.standard_normal(30)
    hist = [(a + 1.0, r)]
    nxt, new_hist, fallback = scf.mix_density(hist, a, a + r, m=5, beta=0.5)
    assert fallback
    assert np.allclose(nxt, a + 0.5 * r)
    assert len(new_hist) == 1


def test_mixing_solves_linear_fixed_point(rng):
    """On a linear contraction the Pulay sequence reaches the fixed point much
    faster than simple mixing."""
    n = 8
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    M = Q @ np.diag(np.linspace(0.1, 0.5, n)) @ Q.T
    c = rng.standard_normal(n)
    fixed = np.linalg.solve(np.eye(n) - M, c)
    x, hist = np.zeros(n), []
    for _ in range(20):
        x, hist, _ = scf.mix_density(hist, x, M @ x + c, m=n + 1, beta=0.7)
    assert np.linalg.norm(x - fixed) < 1e-8 * np.linalg.norm(fixed)
    y = np.zeros(n)
    for _ in range(20):
        y = 0.3 * y + 0.7 * (M @ y + c)
    assert np.linalg.norm(y - fixed) > 1e3 * np.linalg.norm(x - fixed)


def test_mixing_caps_large_coefficients():
    """A stiff scalar map needs an extrapolation coefficient near 1/(1 - 0.95)
    = 20; the mixer refuses it and takes a simple-mixing step instead."""
    hist = []
    x = 0.0
    for _ in range(2):
        x, hist, fallback = scf.mix_density(hist, np.array([x]), np.array([0.95 * x + 1.0]),
                                            m=5, beta=0.5)
        x = float(x[0])
    assert fallback
    assert len(hist) == 1


def test_mixing_tucker_matches_arrays(rng):
    from conftest import random_tucker

    a, b = random_tucker(rng, 8, (2, 2, 2)), random_tucker(rng, 8, (2, 2, 2))
    c = random_tucker(rng, 8, (2, 2, 2))
    ta, _, _ = scf.mix_density([(c, tucker.add(a, tucker.scale(c, -1.0)))], a, b, 3, 0.6, 1e-13)
    da, _, _ = scf.mix_density([(c.full(), a.full() - c.full())], a.full(), b.full(), 3, 0.6)
    assert rel_err(ta.full(), da) < 1e-10


# -- potentials and Green step ------------------------------------------------

def test_density_and_electron_count():
    ops, phi, st = _hydrogen_state(32)
    assert abs(scf.electron_count(st.density, ops.grid) - 1.0) < 10 * ops.tol
    rho2 = scf.density([phi, phi], 2.0, 1e-10)
    assert abs(scf.electron_count(rho2, ops.grid) - 4.0) < 1e-8


def test_single_electron_hf_self_interaction_cancels():
    ops, phi, st = _hydrogen_state(32)
    ve = tucker.hadamard_exact(ops.v_ext, phi)
    diff = tucker.add(st.v_orbitals[0], tucker.scale(ve, -1.0))
    assert tucker.norm(diff) < 10 * ops.tol * tucker.norm(ve)
    rep = scf.total_energy(st, ops.kernel, "hf", HYDROGEN, 1e-8)
    assert abs(rep.total - (-0.5)) < 1e-8
    assert abs(rep.components["coulomb"] - rep.components["exchange"]) < 1e-7


@pytest.mark.parametrize("n", [32, 64])
def test_green_step_preserves_hydrogen_ground_state(n):
    ops, phi, st = _hydrogen_state(n)
    hat, lam = scf.green_step(st, ops)
    cos = tucker.inner(hat[0], phi) / (tucker.norm(hat[0]) * tucker.norm(phi))
    assert 1 - cos <= 1e-3 * ops.grid.h**2
    assert lam[0] == -0.5


def test_green_step_zero_potential():
    ops, phi, st = _hydrogen_state(16)
    st.v_orbitals = [tucker.zeros((16,) * 3)]
    hat, _ = scf.green_step(st, ops)
    assert tucker.norm(hat[0]) == 0.0


def test_green_step_caps_nonnegative_energy(caplog):
    ops, phi, st = _hydrogen_state(16)
    st.energies = np.array([0.2])
    with caplog.at_level(logging.WARNING, logger="tensorscf.scf"):
        _, lam = scf.green_step(st, ops)
    assert lam[0] == scf.LAMBDA_CAP
    assert "not negative" in caplog.text


def test_green_step_inverts_shifted_laplacian():
    ops, phi, st = _hydrogen_state(16)
    hat, lam = scf.green_step(st, ops, eps=1e-12)
    back = poisson.apply_laplacian(ops.grid, hat[0])
    # (-Lap/2 - lam) hat = -V phi
    lhs = tucker.add(tucker.scale(back, -0.5), tucker.scale(hat[0], -lam[0]))
    assert rel_err(lhs.full(), -st.v_orbitals[0].full()) < 1e-9


# -- full solves --------------------------------------------------------------

def test_scf_rejects_bad_eps():
    with pytest.raises(ValueError):
        scf.scf_solve(HYDROGEN, Grid(6.0, 16), "hf", 1e-2)
    with pytest.raises(ValueError):
        scf.scf_solve(HYDROGEN, Grid(6.0, 16), "dft", 1e-5)


def test_hydrogen_solve_converges():
    rep = scf.scf_solve(HYDROGEN, Grid(8.0, 32), "hf", 1e-6)
    assert rep.converged
    # coarse grid; the cusp makes the discrete eigenvalue a few percent low
    assert abs(rep.homo + 0.5) < 0.05
    assert abs(rep.total - rep.homo) < 1e-6
    assert rep.trace[-1]["rel_change"] < 1e-6
    h3 = Grid(8.0, 32).h**3
    assert abs(h3 * tucker.inner(rep.state.orbitals[0], rep.state.orbitals[0]) - 1) < 1e-6


def test_helium_lda_electron_count_and_orthonormality():
    mol = scf.Molecule.neutral([2.0], [[0.0, 0.0, 0.0]], "He")
    g = Grid(7.0, 32)
    rep = scf.scf_solve(mol, g, "lda", 1e-5, max_iter=40)
    assert rep.converged
    assert abs(scf.electron_count(rep.state.density, g) - 2.0) < 1e-4
    assert rep.components["xc_energy"] < 0


def test_beryllium_orbitals_orthonormal():
    mol = scf.Molecule.neutral([4.0], [[0.0, 0.0, 0.0]], "Be")
    g = Grid(7.0, 32)
    rep = scf.scf_solve(mol, g, "hf", 1e-5, max_iter=60)
    G = scf.gram(rep.state.orbitals, rep.state.orbitals, g.h**3)
    assert np.abs(G - np.eye(2)).max() < 1e-5
    assert rep.orbital_energies[0] < rep.orbital_energies[1] < 0


def test_solve_is_reproducible():
    a = scf.scf_solve(HYDROGEN, Grid(6.0, 16), "lda", 1e-5, max_iter=5)
    b = scf.scf_solve(HYDROGEN, Grid(6.0, 16), "lda", 1e-5, max_iter=5)
    assert a.total == b.total
    assert [t["lambda"] for t in a.trace] == [t["lambda"] for t in b.trace]


# -- converged-state invariants -----------------------------------------------

@pytest.fixture(scope="module")
def beryllium_run():
    """Be HF at n=64 driven iteration by iteration, plus four extra
    iterations after the stopping test first passes."""
    eps = 1e-6
    mol = scf.Molecule.neutral([4.0], [[0.0, 0.0, 0.0]], "Be")
    g = Grid(8.0, 64)
    ops = scf.build_operators(mol, g, "hf", eps)
    state = scf.initial_state(mol, ops)
    log = []
    extra = None
    for _ in range(60):
        prev = state.energies
        state, F = scf.scf_iteration(state, mol, ops)
        rel = np.max(np.abs(state.energies - prev) / np.abs(state.energies))
        G = scf.gram(state.orbitals, state.orbitals, ops.h3)
        log.append({"rel": rel, "count": scf.electron_count(state.density, g),
                    "ortho": np.abs(G - np.eye(2)).max(), "F": F})
        if extra is None and rel < eps:
            extra = len(log)
            converged = state
        if extra is not None and len(log) == extra + 4:
            break
    return mol, ops, converged, log, extra


def test_orthonormal_after_every_iteration(beryllium_run):
    _, ops, _, log, _ = beryllium_run
    assert max(e["ortho"] for e in log) <= 10 * ops.eps


def test_electron_count_conserved(beryllium_run):
    _, _, _, log, _ = beryllium_run
    assert max(abs(e["count"] - 4) / 4 for e in log) <= 1e-3


def test_convergence_stagnates_below_eps(beryllium_run):
    _, ops, _, log, extra = beryllium_run
    assert extra is not None and extra <= 60
    assert all(e["rel"] < ops.eps for e in log[extra - 1:])


def test_converged_fock_matrix_diagonal_and_symmetric(beryllium_run):
    _, _, _, log, extra = beryllium_run
    F = log[extra - 1]["F"]
    d = np.abs(np.diag(F.matrix))
    assert abs(F.matrix[0, 1]) <= 1e-5 * d.min()
    assert F.asymmetry <= 1e-6


def test_green_step_fixed_point(beryllium_run):
    _, ops, state, _, _ = beryllium_run
    hat, _ = scf.green_step(state, ops)
    for p, q in zip(hat, state.orbitals):
        p = tucker.scale(p, 1 / np.sqrt(ops.h3 * tucker.inner(p, p)))
        d = tucker.add(p, tucker.scale(q, -1.0))
        assert np.sqrt(ops.h3 * tucker.inner(d, d)) <= 10 * ops.eps


def test_converged_energies_sorted_negative(beryllium_run):
    _, _, state, _, _ = beryllium_run
    assert np.all(np.diff(state.energies) > 0) and np.all(state.energies < 0)


def test_single_orbital_block_path_equals_scalar_update(rng):
    """With one orbital, the block formula equals
    lam + <V' phi_hat - V phi, phi_hat> / <phi_hat, phi_hat>."""
    g = Grid(3.0, 16)
    h3 = g.h**3
    phi = smooth_tucker(rng, g, (2, 2, 2))
    hat = tucker.scale(phi, 1.3) + smooth_tucker(rng, g, (1, 1, 1))
    v_phi = smooth_tucker(rng, g, (2, 2, 2))
    v_hat = smooth_tucker(rng, g, (2, 2, 2))
    lam = -0.7
    tilde, L = scf.orthogonalize([hat], h3, 1e-14)
    v_tilde = [tucker.scale(v_hat, 1 / L[0, 0])]
    F = scf.fock_matrix(tilde, [hat], [phi], [v_phi], v_tilde, L, [lam], h3)
    nn = tucker.inner(hat, hat)
    scalar = lam + (tucker.inner(v_hat, hat) - tucker.inner(v_phi, hat)) / nn
    assert abs(F.matrix[0, 0] - scalar) <= 1e-12 * abs(scalar)


def _ks_state(g, rho, phi):
    zero = tucker.zeros((g.n,) * 3)
    return scf.SCFState([phi], np.array([-0.5]), rho, zero)


def test_ks_zero_density_leaves_external_potential(rng):
    g = Grid(3.0, 16)
    phi = smooth_tucker(rng, g, (2, 2, 2))
    v_ext = smooth_tucker(rng, g, (1, 2, 1))
    zero = tucker.zeros((16,) * 3)
    out = scf.apply_potential_ks(_ks_state(g, zero, phi), None, v_ext, phi, 1e-10)
    assert rel_err(out.full(), (v_ext.full() * phi.full())) < 1e-9


def test_ks_uniform_density_matches_scalar_formula(rng):
    from tensorscf import xc

    g = Grid(3.0, 16)
    rho0 = 0.03
    rho = tucker.rank_one(*[np.ones(16)] * 3, weight=rho0)
    phi = smooth_tucker(rng, g, (2, 2, 2))
    out = scf.apply_potential_ks(_ks_state(g, rho, phi), None, tucker.zeros((16,) * 3), phi, 1e-10)
    rs = (3 / (4 * np.pi * rho0)) ** (1 / 3)
    mu_c = (-0.1423 * (1 + 7 / 6 * 1.0529 * np.sqrt(rs) + 4 / 3 * 0.3334 * rs)
            / (1 + 1.0529 * np.sqrt(rs) + 0.3334 * rs) ** 2)
    v = -(3 / np.pi) ** (1 / 3) * rho0 ** (1 / 3) + mu_c
    assert abs(v - xc.lda_potential(rho0)) < 1e-14
    assert rel_err(out.full(), v * phi.full()) < 1e-9


def test_ks_negative_density_is_clamped(rng, caplog):
    g = Grid(3.0, 16)
    rho = tucker.rank_one(*[np.ones(16)] * 3, weight=-1e-3)
    phi = smooth_tucker(rng, g, (2, 2, 2))
    with caplog.at_level(logging.DEBUG, logger="tensorscf.scf"):
        out = scf.apply_potential_ks(_ks_state(g, rho, phi), None, tucker.zeros((16,) * 3), phi, 1e-10)
    assert tucker.norm(out) < 1e-12 * tucker.norm(phi)
    assert "clamped" in caplog.text


def test_energy_report_nuclear_repulsion_exact():
    """Two protons sharing one electron: E_nn = 1/d in the report."""
    mol = scf.Molecule([1.0, 1.0], [[0, 0, -1.0], [0, 0, 1.0]], 1, 1.0, "H2+")
    rep = scf.scf_solve(mol, Grid(6.0, 16), "hf", 1e-4, max_iter=3)
    assert rep.nuclear_repulsion == 0.5
    assert np.isfinite(rep.total)


def _dense_coulomb(kernel, f):
    import scipy.signal

    n = f.shape[0]
    full = scipy.signal.fftconvolve(f, kernel.galerkin_tensor.full(), mode="full")
    return full[n - 1:2 * n - 1, n - 1:2 * n - 1, n - 1:2 * n - 1] / kernel.grid.h**3


def test_hf_potential_vs_dense_expression(rng):
    mol = scf.Molecule.neutral([2.0, 2.0], [[0.3, 0, 0], [-0.4, 0.2, 0]])
    g = Grid(3.0, 24)
    ops = scf.build_operators(mol, g, "hf", 1e-8)
    orbs, _ = scf.orthogonalize([smooth_tucker(rng, g, (2, 2, 2)) for _ in range(2)], ops.h3, 1e-13)
    st = scf._prepare(orbs, [-1.0, -0.5], mol, ops)
    P = [o.full() for o in orbs]
    rho = 2 * (P[0] ** 2 + P[1] ** 2)
    vc = _dense_coulomb(ops.kernel, rho)
    for i, p in enumerate(P):
        ref = (ops.v_ext.full() + vc) * p - sum(q * _dense_coulomb(ops.kernel, q * p) for q in P)
        assert rel_err(st.v_orbitals[i].full(), ref) < 1e-6


def test_closed_shell_single_orbital_exchange_is_half_coulomb(rng):
    """With rho = 2 phi^2: V_coul phi - K phi = conv(phi^2) phi."""
    mol = scf.Molecule.neutral([2.0], [[0, 0, 0]])
    g = Grid(3.0, 24)
    ops = scf.build_operators(mol, g, "hf", 1e-8)
    (phi,), _ = scf.orthogonalize([smooth_tucker(rng, g, (2, 2, 2))], ops.h3, 1e-13)
    st = scf._prepare([phi], [-0.9], mol, ops)
    p = phi.full()
    ref = (ops.v_ext.full() + _dense_coulomb(ops.kernel, p * p)) * p
    assert rel_err(st.v_orbitals[0].full(), ref) < 1e-6
