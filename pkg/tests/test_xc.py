import numpy as np
import pytest

from tensorscf import xc

# Perdew-Zunger unpolarized values at rs = 0.5, 2, 5 from an independent
# 30-digit mpmath evaluation: (rho, v_xc, eps_xc).
FROZEN = [
    (1.909859317102744, -1.3063597575241686, -0.99238061106226003),
    (0.029841551829730375, -0.35725647077862469, -0.2741738602754198),
    (0.001909859317102744, -0.15586691994279768, -0.11997201744598993),
]


@pytest.mark.parametrize("rho,vxc,exc", FROZEN)
def test_frozen_values(rho, vxc, exc):
    assert abs(xc.lda_energy_density(rho) - exc) < 1e-13
    assert abs(xc.lda_potential(rho) - vxc) < 1e-13


def test_potential_is_derivative():
    rho = np.geomspace(1e-6, 50.0, 200)
    step = 1e-5 * rho
    f = lambda r: r * xc.lda_energy_density(r)
    fd = (f(rho + step) - f(rho - step)) / (2 * step)
    assert np.max(np.abs(fd - xc.lda_potential(rho)) / np.abs(fd)) < 1e-7


def test_correlation_nearly_continuous_at_rs_one():
    rho = 3 / (4 * np.pi)
    lo = xc.correlation_energy_density(rho * (1 + 1e-12))
    hi = xc.correlation_energy_density(rho * (1 - 1e-12))
    assert abs(lo - hi) < 1e-4


def test_zero_density():
    z = np.zeros(4)
    assert np.all(xc.lda_energy_density(z) == 0)
    assert np.all(xc.lda_potential(z) == 0)
    assert np.all(np.isfinite(xc.lda_potential(np.array([0.0, 1e-40, 1.0]))))


def test_exchange_scaling():
    rho = np.array([0.1, 1.0, 3.0])
    assert np.allclose(xc.exchange_potential(8 * rho), 2 * xc.exchange_potential(rho), rtol=1e-14)
    assert np.allclose(xc.exchange_potential(rho), 4 / 3 * xc.exchange_energy_density(rho), rtol=1e-14)
