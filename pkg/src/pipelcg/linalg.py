"""Sparse/dense kernels over rank-partitioned vectors.

Vectors are split into ``P`` contiguous row blocks, one per (simulated)
rank.  Global reductions are always formed from per-rank partials combined
by a fixed, rank-ordered pairwise tree, so every backend and every run sees
bit-identical sums.

Matrix Market (coordinate) and vector I/O live here as well.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation

__all__ = [
    "SparseMatrix",
    "RankedVector",
    "block_partition",
    "tree_sum",
    "spmv",
    "axpy",
    "dot_local",
    "dot",
    "norm",
    "local_dots",
    "read_matrix_market",
    "write_matrix_market",
    "MatrixMarketError",
    "save_vector",
    "load_vector",
]

# symmetry is verified on construction up to this many stored entries
SYMMETRY_CHECK_MAX_NNZ = 5_000_000


@dataclass(eq=False)
class SparseMatrix:
    """Square CSR matrix.

    ``row_offsets``, ``col_indices`` and ``values`` are the usual CSR
    triplet.  When ``symmetric_flag`` is set the pattern and values are
    checked for exact symmetry on construction.
    """

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    symmetric_flag: bool = False
    _csr: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        self.n = int(self.n)
        self.row_offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        n, ro, ci = self.n, self.row_offsets, self.col_indices
        if n < 0:
            raise ContractViolation(f"matrix size must be nonnegative, got {n}")
        if ro.shape != (n + 1,):
            raise ContractViolation(f"row_offsets must have length n+1={n + 1}, got {ro.shape}")
        if ro[0] != 0 or np.any(np.diff(ro) < 0):
            raise ContractViolation("row_offsets must start at 0 and be nondecreasing")
        if ro[-1] != ci.size or ci.size != self.values.size:
            raise ContractViolation("row_offsets[-1], col_indices and values disagree on nnz")
        if ci.size and (ci.min() < 0 or ci.max() >= n):
            raise ContractViolation("column index out of range [0, n)")
        self._csr = sp.csr_matrix((self.values, ci, ro), shape=(n, n))
        if self.symmetric_flag and ci.size <= SYMMETRY_CHECK_MAX_NNZ:
            if not self._is_symmetric():
                raise ContractViolation("symmetric_flag set but matrix is not symmetric")

    def _is_symmetric(self) -> bool:
        diff = (self._csr - self._csr.T).tocsr()
        diff.eliminate_zeros()
        return diff.nnz == 0

    @classmethod
    def from_scipy(cls, mat, symmetric: bool | None = None) -> "SparseMatrix":
        csr = sp.csr_matrix(mat, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        if csr.shape[0] != csr.shape[1]:
            raise ContractViolation(f"matrix must be square, got {csr.shape}")
        if symmetric is None:
            d = (csr - csr.T).tocsr()
            d.eliminate_zeros()
            symmetric = d.nnz == 0
        return cls(csr.shape[0], csr.indptr, csr.indices, csr.data, symmetric)

    @classmethod
    def from_dense(cls, a, symmetric: bool | None = None) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=np.float64)), symmetric)

    @classmethod
    def diagonal_matrix(cls, d) -> "SparseMatrix":
        d = np.asarray(d, dtype=np.float64)
        n = d.size
        return cls(n, np.arange(n + 1), np.arange(n), d.copy(), True)

    @property
    def nnz(self) -> int:
        return int(self.col_indices.size)

    @property
    def shape(self):
        return (self.n, self.n)

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal()

    def matvec(self, x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Raw ndarray product, used by the solvers' inner loops."""
        y = self._csr @ x
        if out is None:
            return y
        out[...] = y
        return out


def block_partition(n: int, ranks: int) -> np.ndarray:
    """Contiguous block-row boundaries: ``ranks + 1`` offsets covering [0, n)."""
    if ranks < 1:
        raise ContractViolation(f"need at least one rank, got {ranks}")
    if ranks > max(n, 1):
        raise ContractViolation(f"cannot split {n} rows over {ranks} ranks")
    base, extra = divmod(n, ranks)
    sizes = np.full(ranks, base, dtype=np.int64)
    sizes[:extra] += 1
    return np.concatenate([[0], np.cumsum(sizes)])


def _check_partition(partition: np.ndarray, n: int) -> np.ndarray:
    p = np.asarray(partition, dtype=np.int64)
    if p.ndim != 1 or p.size < 2 or p[0] != 0 or p[-1] != n:
        raise ContractViolation(f"partition must run from 0 to n={n}")
    if np.any(np.diff(p) <= 0) and n > 0:
        raise ContractViolation("partition boundaries must be strictly increasing")
    return p


class RankedVector:
    """A length-``n`` vector split into contiguous per-rank segments."""

    __slots__ = ("data", "partition")

    def __init__(self, data, partition=None, ranks: int = 1):
        self.data = np.array(data, dtype=np.float64).reshape(-1)
        if partition is None:
            partition = block_partition(self.data.size, ranks)
        self.partition = _check_partition(partition, self.data.size)

    @property
    def n(self) -> int:
        return self.data.size

    @property
    def ranks(self) -> int:
        return self.partition.size - 1

    def segment(self, rank: int) -> np.ndarray:
        if not 0 <= rank < self.ranks:
            raise ContractViolation(f"rank {rank} out of range [0, {self.ranks})")
        return self.data[self.partition[rank]:self.partition[rank + 1]]

    def same_layout(self, other: "RankedVector") -> bool:
        return self.n == other.n and np.array_equal(self.partition, other.partition)

    def copy(self) -> "RankedVector":
        return RankedVector(self.data.copy(), self.partition)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"RankedVector(n={self.n}, ranks={self.ranks})"


def tree_sum(partials) -> np.ndarray:
    """Sum per-rank rows with a rank-ordered pairwise tree.

    ``partials`` has shape ``(P, m)``; the result has shape ``(m,)``.  The
    combination order depends only on ``P``, never on timing.
    """
    level = [np.asarray(row, dtype=np.float64) for row in partials]
    if not level:
        raise ContractViolation("tree_sum needs at least one rank")
    while len(level) > 1:
        nxt = [level[k] + level[k + 1] for k in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return np.array(level[0], dtype=np.float64)


def spmv(A: SparseMatrix, x: RankedVector) -> RankedVector:
    if A.n != x.n:
        raise ContractViolation(f"spmv dimension mismatch: A is {A.n}x{A.n}, x has {x.n}")
    # row sums do not depend on the block split, so one CSR product serves all ranks
    return RankedVector(A.matvec(x.data), x.partition)


def axpy(alpha: float, x: RankedVector, y: RankedVector) -> RankedVector:
    if not x.same_layout(y):
        raise ContractViolation("axpy operands have different partitions")
    return RankedVector(y.data + alpha * x.data, y.partition)


def dot_local(x: RankedVector, y: RankedVector, rank: int) -> float:
    if not x.same_layout(y):
        raise ContractViolation("dot operands have different partitions")
    return float(np.dot(x.segment(rank), y.segment(rank)))


def dot(x: RankedVector, y: RankedVector) -> float:
    partials = [[dot_local(x, y, r)] for r in range(x.ranks)]
    return float(tree_sum(partials)[0])


def norm(x: RankedVector) -> float:
    return float(np.sqrt(dot(x, x)))


def local_dots(partition: np.ndarray, u: np.ndarray, vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Per-rank partials of ``(u, v)`` for each ``v``: array of shape ``(P, len(vectors))``."""
    P = len(partition) - 1
    out = np.empty((P, len(vectors)))
    for r in range(P):
        lo, hi = partition[r], partition[r + 1]
        us = u[lo:hi]
        for k, v in enumerate(vectors):
            out[r, k] = np.dot(us, v[lo:hi])
    return out


# -- Matrix Market ---------------------------------------------------------

class MatrixMarketError(ValueError):
    def __init__(self, path, lineno, message):
        self.path, self.lineno = path, lineno
        super().__init__(f"{path}:{lineno}: {message}")


def read_matrix_market(path) -> SparseMatrix:
    """Read a real/integer/pattern coordinate file (general or symmetric)."""
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixMarketError(path, 1, "empty file")
    header = lines[0].split()
    if len(header) != 5 or header[0].lower() != "%%matrixmarket":
        raise MatrixMarketError(path, 1, "missing %%MatrixMarket header")
    obj, fmt, field_, symm = (h.lower() for h in header[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixMarketError(path, 1, f"only 'matrix coordinate' is supported, got {obj} {fmt}")
    if field_ not in ("real", "integer", "pattern"):
        raise MatrixMarketError(path, 1, f"unsupported field '{field_}'")
    if symm not in ("general", "symmetric"):
        raise MatrixMarketError(path, 1, f"unsupported symmetry '{symm}'")

    lineno = 1
    size = None
    rows, cols, vals = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        s = line.strip()
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        if size is None:
            try:
                size = tuple(int(t) for t in parts)
            except ValueError:
                raise MatrixMarketError(path, lineno, f"bad size line {s!r}") from None
            if len(size) != 3:
                raise MatrixMarketError(path, lineno, "size line needs 'rows cols nnz'")
            continue
        want = 2 if field_ == "pattern" else 3
        if len(parts) != want:
            raise MatrixMarketError(path, lineno, f"expected {want} fields, got {len(parts)}")
        try:
            i, j = int(parts[0]) - 1, int(parts[1]) - 1
            v = 1.0 if field_ == "pattern" else float(parts[2])
        except ValueError:
            raise MatrixMarketError(path, lineno, f"cannot parse entry {s!r}") from None
        if not (0 <= i < size[0] and 0 <= j < size[1]):
            raise MatrixMarketError(path, lineno, f"index ({i + 1}, {j + 1}) outside {size[0]}x{size[1]}")
        rows.append(i)
        cols.append(j)
        vals.append(v)
    if size is None:
        raise MatrixMarketError(path, lineno, "missing size line")
    if len(vals) != size[2]:
        raise MatrixMarketError(path, lineno, f"header promises {size[2]} entries, found {len(vals)}")
    if size[0] != size[1]:
        raise ContractViolation(f"{path}: matrix is {size[0]}x{size[1]}, need square")

    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if symm == "symmetric":
        off = rows != cols
        rows, cols, vals = (np.concatenate([rows, cols[off]]),
                            np.concatenate([cols, rows[off]]),
                            np.concatenate([vals, vals[off]]))
    coo = sp.coo_matrix((vals, (rows, cols)), shape=(size[0], size[0]))
    return SparseMatrix.from_scipy(coo, symmetric=True if symm == "symmetric" else None)


def write_matrix_market(path, A: SparseMatrix, symmetric: bool | None = None) -> None:
    """Write ``A`` as a real coordinate file; symmetric matrices store the lower triangle."""
    symmetric = A.symmetric_flag if symmetric is None else symmetric
    coo = A.to_scipy().tocoo()
    r, c, v = coo.row, coo.col, coo.data
    if symmetric:
        keep = r >= c
        r, c, v = r[keep], c[keep], v[keep]
    kind = "symmetric" if symmetric else "general"
    with open(path, "w") as fh:
        fh.write(f"%%MatrixMarket matrix coordinate real {kind}\n")
        fh.write(f"{A.n} {A.n} {v.size}\n")
        for i, j, x in zip(r, c, v):
            fh.write(f"{i + 1} {j + 1} {float(x)!r}\n")


# -- vectors ---------------------------------------------------------------

def save_vector(path, x, binary: bool = False) -> None:
    """Plain text (one value per line, round-trip precision) or ``.npy`` binary."""
    data = np.asarray(x, dtype=np.float64).reshape(-1)
    if binary:
        with open(path, "wb") as fh:
            np.save(fh, data, allow_pickle=False)
    else:
        np.savetxt(path, data, fmt="%.17g")


def load_vector(path, binary: bool | None = None) -> np.ndarray:
    path = Path(path)
    if binary is None:
        with open(path, "rb") as fh:
            binary = fh.read(6) == b"\x93NUMPY"
    if binary:
        return np.load(path, allow_pickle=False).astype(np.float64).reshape(-1)
    return np.loadtxt(path, dtype=np.float64, ndmin=1)
