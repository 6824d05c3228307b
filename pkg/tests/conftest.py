import numpy as np
import pytest

from tensorscf import tucker


def random_tucker(rng, n, ranks, decay=None):
    """Random Tucker tensor; ``decay`` makes the core spectrum fall off."""
    core = rng.standard_normal(ranks)
    if decay is not None:
        for m, r in enumerate(ranks):
            shape = [1, 1, 1]
            shape[m] = r
            core = core * (decay ** np.arange(r)).reshape(shape)
    shape = (n,) * 3 if np.isscalar(n) else n
    return tucker.TuckerTensor(core, [rng.standard_normal((s, r)) for s, r in zip(shape, ranks)])


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(np.asarray(b))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def dense_laplacian(n, h):
    """7-point Dirichlet Laplacian on n^3 cells as a sparse matrix."""
    import scipy.sparse as sp

    d = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) / h**2
    eye = sp.identity(n)
    return (sp.kron(sp.kron(d, eye), eye) + sp.kron(sp.kron(eye, d), eye)
            + sp.kron(sp.kron(eye, eye), d)).tocsr()


def smooth_tucker(rng, grid, ranks):
    """Random Tucker tensor built from low sine modes, so it vanishes at the
    box walls like an orbital does."""
    n = grid.n
    x = (grid.centers + grid.half_width) / (2 * grid.half_width)
    factors = []
    for r in ranks:
        modes = np.column_stack([np.sin(np.pi * (k + 1) * x) for k in range(6)])
        factors.append(modes @ (rng.standard_normal((6, r)) / (1 + np.arange(6))[:, None] ** 2))
    return tucker.TuckerTensor(rng.standard_normal(ranks), factors)


def random_fock_case(rng, grid, n_orb=3, eps=1e-13):
    """Orbitals, two potentials and shifts for the derivative-free Fock test.

    Returns the matrix from ``fock_matrix`` and the one from the explicit
    dense Laplacian applied to the same orthogonalized candidates."""
    from tensorscf import poisson, scf

    h3 = grid.h**3
    phi = [smooth_tucker(rng, grid, (2, 2, 2)) for _ in range(n_orb)]
    pot = lambda: tucker.add(tucker.scale(smooth_tucker(rng, grid, (2, 2, 2)), 0.3),
                             tucker.rank_one(*[-np.ones(grid.n)] * 3))
    V, V2 = pot(), pot()
    lam = -np.sort(rng.uniform(0.1, 2.0, n_orb))[::-1]
    v_phi = [tucker.hadamard_exact(V, p) for p in phi]
    hat = [tucker.scale(poisson.solve(poisson.ShiftedLaplacian(grid, 2 * l), vp, eps), -2.0)
           for l, vp in zip(lam, v_phi)]
    tilde, L = scf.orthogonalize(hat, h3, eps)
    v_tilde = [tucker.hadamard_exact(V2, t) for t in tilde]
    F = scf.fock_matrix(tilde, hat, phi, v_phi, v_tilde, L, lam, h3)
    A = -0.5 * dense_laplacian(grid.n, grid.h)
    T = np.column_stack([t.full().ravel() for t in tilde])
    HT = A @ T + V2.full().ravel()[:, None] * T
    return F, h3 * T.T @ HT


def pytest_runtest_logreport(report):
    """Record a FAIL line for an acceptance test that raised before it could
    report its own verdict."""
    import re
    import sys

    if report.when != "call" or not report.failed or "test_acceptance" not in report.nodeid:
        return
    mod = sys.modules.get("test_acceptance")
    m = re.search(r"criterion_(\d+)", report.nodeid)
    if mod is not None and m and int(m.group(1)) not in mod.RESULTS:
        msg = str(report.longrepr).strip().splitlines()[-1][:160]
        mod.RESULTS[int(m.group(1))] = f"ACCEPTANCE {int(m.group(1)):2d} FAIL: raised {msg}"


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in range(1, 11):
            terminalreporter.write_line(
                results.get(k, f"ACCEPTANCE {k:2d} NOT RUN"))
