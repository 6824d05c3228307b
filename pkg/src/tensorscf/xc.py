"""Local density approximation: Slater exchange and Perdew-Zunger (1981)
correlation for the spin-unpolarized electron gas."""
from __future__ import annotations

import numpy as np

# Perdew-Zunger constants, unpolarized branch.
GAMMA, BETA1, BETA2 = -0.1423, 1.0529, 0.3334
A, B, C, D = 0.0311, -0.048, 0.0020, -0.0116

_CX = (3.0 / np.pi) ** (1.0 / 3.0)
RHO_FLOOR = 1e-30


def wigner_seitz_radius(rho):
    return (3.0 / (4.0 * np.pi * rho)) ** (1.0 / 3.0)


def _split(rho):
    rho = np.asarray(rho, dtype=float)
    live = rho > RHO_FLOOR
    return rho, live, np.where(live, rho, 1.0)


def exchange_energy_density(rho):
    """Exchange energy per electron, -(3/4)(3/pi)^(1/3) rho^(1/3)."""
    rho, live, r = _split(rho)
    return np.where(live, -0.75 * _CX * np.cbrt(r), 0.0)


def exchange_potential(rho):
    rho, live, r = _split(rho)
    return np.where(live, -_CX * np.cbrt(r), 0.0)


def correlation_energy_density(rho):
    """PZ81 correlation energy per electron."""
    rho, live, r = _split(rho)
    rs = wigner_seitz_radius(r)
    sq = np.sqrt(rs)
    low = GAMMA / (1.0 + BETA1 * sq + BETA2 * rs)
    lrs = np.log(rs)
    high = A * lrs + B + C * rs * lrs + D * rs
    return np.where(live, np.where(rs >= 1.0, low, high), 0.0)


def correlation_potential(rho):
    """PZ81 correlation potential d(rho*eps_c)/d rho."""
    rho, live, r = _split(rho)
    rs = wigner_seitz_radius(r)
    sq = np.sqrt(rs)
    den = 1.0 + BETA1 * sq + BETA2 * rs
    low = GAMMA / den * (1.0 + 7.0 / 6.0 * BETA1 * sq + 4.0 / 3.0 * BETA2 * rs) / den
    lrs = np.log(rs)
    high = A * lrs + (B - A / 3.0) + 2.0 / 3.0 * C * rs * lrs + (2.0 * D - C) / 3.0 * rs
    return np.where(live, np.where(rs >= 1.0, low, high), 0.0)


def lda_energy_density(rho):
    """Exchange-correlation energy per electron eps_xc(rho)."""
    return exchange_energy_density(rho) + correlation_energy_density(rho)


def lda_potential(rho):
    """v_xc(rho) = d(rho * eps_xc)/d rho."""
    return exchange_potential(rho) + correlation_potential(rho)
