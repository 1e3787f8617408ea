"""Krylov solvers sharing one report and instrumentation layer."""
from .cg import classic_cg
from .common import (COUNTERS, KERNELS, Instrument, Preconditioner, SolveReport,
                     chebyshev_shifts, estimate_spectrum)
from .pcg import pipelined_cg_ghysels
from .plcg import pipelcg_solve

METHODS = ("cg", "pcg", "pipelcg")


def solve(method: str, A, M=None, b=None, x0=None, l: int = 1, **kwargs):
    """Dispatch by name: ``cg``, ``pcg`` or ``pipelcg``."""
    if method == "cg":
        return classic_cg(A, M, b, x0, **kwargs)
    if method == "pcg":
        return pipelined_cg_ghysels(A, M, b, x0, **kwargs)
    if method == "pipelcg":
        return pipelcg_solve(A, M, b, x0, l=l, **kwargs)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


__all__ = [
    "COUNTERS", "KERNELS", "METHODS", "Instrument", "Preconditioner", "SolveReport",
    "chebyshev_shifts", "classic_cg", "estimate_spectrum", "pipelcg_solve",
    "pipelined_cg_ghysels", "solve",
]
