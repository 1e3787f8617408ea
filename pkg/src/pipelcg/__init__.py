"""Classic, pipelined and deep pipelined Conjugate Gradients with a pluggable reduction fabric."""
from .comm import FabricConfig, make_fabric
from .errors import BreakdownError, ContractViolation, FabricSaturationError
from .linalg import RankedVector, SparseMatrix
from .problems import ProblemSpec, build_problem, diagonal_spectrum, laplacian_2d
from .solvers import (Preconditioner, SolveReport, chebyshev_shifts, classic_cg,
                      estimate_spectrum, pipelcg_solve, pipelined_cg_ghysels, solve)

__version__ = "0.1.0"
