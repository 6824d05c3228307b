"""Low-rank Tucker tensor numerics and a grid-based Hartree-Fock / LDA solver."""

from .tucker import Grid, TuckerTensor
from .scf import Molecule, scf_solve
from .extrapolation import GridLadder, aitken, run_ladder

__all__ = ["Grid", "TuckerTensor", "Molecule", "scf_solve", "GridLadder", "aitken", "run_ladder"]
__version__ = "0.1.0"
