"""Variational Monte Carlo for thermal states of lattice fermions.

The package prepares Gibbs states of t-U-V lattice models as pure states on a
doubled (physical + auxiliary) Hilbert space, starting from a mean-field
pair-orbital reference and evolving in imaginary time with a work operator.
Amplitudes are pair determinants, optionally dressed with Jastrow factors and
a bipartite-attention neural backflow.  Exact small-sector oracles back every
Monte Carlo estimator.
"""

from tfdmc.lattice import LatticeGeom, build_lattice, displacement
from tfdmc.fockspace import DoubledConfig, SectorSpec, enumerate_sector
from tfdmc.hamiltonian import ModelParams, Operator, QuadraticHam, work_operator
from tfdmc.meanfield import PairMatrix, SpectralData, diagonalize, pair_matrix

__all__ = [
    "LatticeGeom",
    "build_lattice",
    "displacement",
    "DoubledConfig",
    "SectorSpec",
    "enumerate_sector",
    "ModelParams",
    "Operator",
    "QuadraticHam",
    "work_operator",
    "PairMatrix",
    "SpectralData",
    "diagonalize",
    "pair_matrix",
]

__version__ = "0.1.0"
