"""Deterministic test systems: 2D Laplacian, its diagonal twin, Matrix Market input."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation
from .linalg import SparseMatrix, read_matrix_market, write_matrix_market

__all__ = [
    "ProblemSpec",
    "laplacian_2d",
    "diagonal_spectrum",
    "laplacian_eigenvalues",
    "load_matrix_market",
    "write_matrix_market",
    "build_problem",
]

MAX_ROWS = 2**31 - 1


def _check_grid(nx, ny):
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ContractViolation(f"grid dimensions must be positive integers, got {nx}x{ny}")
    if nx * ny > MAX_ROWS:
        raise ContractViolation(f"{nx}x{ny} grid overflows the row index range")


def laplacian_2d(nx: int, ny: int) -> SparseMatrix:
    """5-point finite-difference Laplacian on an ``nx`` by ``ny`` grid, Dirichlet boundary.

    Unknowns are numbered row-major, ``k = i*ny + j``.
    """
    _check_grid(nx, ny)
    tx = sp.diags([-np.ones(nx - 1), 2 * np.ones(nx), -np.ones(nx - 1)], [-1, 0, 1])
    ty = sp.diags([-np.ones(ny - 1), 2 * np.ones(ny), -np.ones(ny - 1)], [-1, 0, 1])
    A = sp.kron(tx, sp.identity(ny)) + sp.kron(sp.identity(nx), ty)
    return SparseMatrix.from_scipy(A.tocsr(), symmetric=True)


def laplacian_eigenvalues(nx: int, ny: int) -> np.ndarray:
    """Analytic spectrum of :func:`laplacian_2d`, row-major over (i, j)."""
    _check_grid(nx, ny)
    ci = np.cos(np.arange(1, nx + 1) * np.pi / (nx + 1))
    cj = np.cos(np.arange(1, ny + 1) * np.pi / (ny + 1))
    return (4.0 - 2.0 * ci[:, None] - 2.0 * cj[None, :]).reshape(-1)


def diagonal_spectrum(nx: int, ny: int) -> SparseMatrix:
    """Diagonal matrix carrying the Laplacian's eigenvalues: same spectrum, no coupling."""
    return SparseMatrix.diagonal_matrix(laplacian_eigenvalues(nx, ny))


def load_matrix_market(path) -> SparseMatrix:
    return read_matrix_market(path)


@dataclass
class ProblemSpec:
    """Which system to build.  ``rhs`` is ``ones`` or ``random`` (seeded)."""

    kind: str = "laplacian_2d"
    nx: int = 100
    ny: int = 100
    path: str | None = None
    rhs: str = "ones"
    seed: int = 0

    KINDS = ("laplacian_2d", "diagonal_spectrum", "matrix_market")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ContractViolation(f"unknown problem kind {self.kind!r}")
        if self.kind == "matrix_market":
            if not self.path:
                raise ContractViolation("matrix_market problems need a path")
        else:
            _check_grid(self.nx, self.ny)
        if self.rhs not in ("ones", "random"):
            raise ContractViolation(f"rhs must be 'ones' or 'random', got {self.rhs!r}")

    @classmethod
    def parse(cls, text: str, rhs: str = "ones", seed: int = 0) -> "ProblemSpec":
        """Parse ``laplacian2d:100x100``, ``diagonal:50x50`` or ``mm:path/to/file.mtx``."""
        kind, _, arg = text.partition(":")
        kind = kind.strip().lower().replace("-", "_")
        aliases = {"laplacian2d": "laplacian_2d", "laplacian_2d": "laplacian_2d",
                   "diagonal": "diagonal_spectrum", "diagonal_spectrum": "diagonal_spectrum",
                   "mm": "matrix_market", "matrix_market": "matrix_market"}
        if kind not in aliases:
            raise ContractViolation(f"unknown problem {text!r}")
        kind = aliases[kind]
        if kind == "matrix_market":
            return cls(kind=kind, path=arg, rhs=rhs, seed=seed)
        m = re.fullmatch(r"\s*(\d+)\s*(?:x\s*(\d+))?\s*", arg)
        if not m:
            raise ContractViolation(f"expected grid size like 100x100 in {text!r}")
        nx = int(m.group(1))
        ny = int(m.group(2)) if m.group(2) else nx
        return cls(kind=kind, nx=nx, ny=ny, rhs=rhs, seed=seed)

    def label(self) -> str:
        if self.kind == "matrix_market":
            return f"mm:{self.path}"
        short = {"laplacian_2d": "laplacian2d", "diagonal_spectrum": "diagonal"}[self.kind]
        return f"{short}:{self.nx}x{self.ny}"


def build_problem(spec: ProblemSpec) -> tuple[SparseMatrix, np.ndarray]:
    """Return ``(A, b)`` for a :class:`ProblemSpec`."""
    if spec.kind == "laplacian_2d":
        A = laplacian_2d(spec.nx, spec.ny)
    elif spec.kind == "diagonal_spectrum":
        A = diagonal_spectrum(spec.nx, spec.ny)
    else:
        A = load_matrix_market(spec.path)
    if spec.rhs == "ones":
        b = np.ones(A.n)
    else:
        b = np.random.default_rng(spec.seed).standard_normal(A.n)
    return A, b
