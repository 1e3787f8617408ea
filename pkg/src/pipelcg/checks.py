"""Numerical invariants of a solve, measured against explicitly materialized bases.

These are the quantities the CLI's ``--validate`` mode reports on; each
returns a nonnegative error so callers pick their own tolerance.
"""
from __future__ import annotations

import numpy as np

from .solvers.common import as_matrix, as_preconditioner


def history_deviation(reference, history, stop: int | None = None,
                      floor: float = 0.0) -> np.ndarray:
    """Pointwise ``|h - ref| / ref`` over the common prefix (first ``stop`` entries).

    With ``floor``, the comparison also ends where ``ref`` first drops
    below it: once a history has converged its entries are rounding noise.
    """
    ref = np.asarray(reference, dtype=np.float64)
    h = np.asarray(history, dtype=np.float64)
    m = min(len(ref), len(h)) if stop is None else min(len(ref), len(h), stop)
    below = np.flatnonzero(ref[:m] < floor)
    if below.size:
        m = int(below[0])
    ref, h = ref[:m], h[:m]
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(h - ref) / np.abs(ref)
    d[(ref == 0) & (h == 0)] = 0.0
    return d


def first_cycle(record: dict) -> dict:
    return record["cycles"][0]


def explicit_bases(record: dict, l: int):
    """``(V, Z)`` of the first pipeline cycle as dense ``n x m`` arrays."""
    c = first_cycle(record)
    return c["window"].recorded_basis(0), c["window"].recorded_basis(l)


def orthonormality_error(V, M=None, A=None) -> float:
    """``max |V^T M V - I|`` (``M`` the preconditioner, or the identity)."""
    MV = V if M is None or as_preconditioner(M, as_matrix(A)).is_identity else \
        np.column_stack([as_preconditioner(M, as_matrix(A)).apply_forward(v) for v in V.T])
    m = V.shape[1]
    return float(np.abs(V.T @ MV - np.eye(m)).max()) if m else 0.0


def lanczos_residual(A, V, T, M=None) -> float:
    """``|| M^{-1} A V_j - V_{j+1} T_{j+1,j} ||_F`` with ``j = T.shape[1]``."""
    A = as_matrix(A)
    Mp = as_preconditioner(M, A)
    j = T.shape[1]
    if j == 0:
        return 0.0
    AV = np.column_stack([Mp.apply(A.matvec(V[:, k])) for k in range(j)])
    return float(np.linalg.norm(AV - V[:, : j + 1] @ T))


def explicit_g(V, Z, M=None, A=None) -> np.ndarray:
    """``G = V^T M Z`` (upper triangle kept), the transform with ``Z = V G``."""
    if M is not None and not as_preconditioner(M, as_matrix(A)).is_identity:
        Mp = as_preconditioner(M, as_matrix(A))
        Z = np.column_stack([Mp.apply_forward(z) for z in Z.T])
    m = min(V.shape[1], Z.shape[1])
    return np.triu(V[:, :m].T @ Z[:, :m])


def g_band_symmetry_error(G: np.ndarray, l: int) -> float:
    """``max |g_{j,i} - g_{i-l, j+l}|`` over the band of a dense ``G``."""
    m = G.shape[0]
    worst = 0.0
    for i in range(m):
        for j in range(max(0, i - 2 * l), i + 1):
            if i - l >= 0 and j + l < m:
                worst = max(worst, abs(G[j, i] - G[i - l, j + l]))
    return worst


def g_agreement_error(state, G_explicit: np.ndarray, l: int) -> float:
    """``max |G_stored - G_explicit|`` over the band of the explicit matrix."""
    m = G_explicit.shape[0]
    worst = 0.0
    for i in range(m):
        if i >= state.G.ncols:
            break
        for j in range(max(0, i - 2 * l), i + 1):
            worst = max(worst, abs(state.G[j, i] - G_explicit[j, i]))
    return worst


def shifted_basis_residual(A, record: dict, l: int, sigma, M=None) -> float:
    """``max || M^{-1}A z^(k)_j - z^(k+1)_{j+1} - sigma_k z^(k)_j ||`` over recorded vectors.

    Only ``j >= k`` is checked: below that the bases are still in start-up
    and hold ``P_j(A) v_0``, which is shifted by ``sigma_j`` instead.
    """
    A = as_matrix(A)
    Mp = as_preconditioner(M, A)
    rec = first_cycle(record)["window"].recorded
    worst = 0.0
    for k in range(l):
        for j, z in rec[k].items():
            nxt = rec[k + 1].get(j + 1)
            if j < k or nxt is None:
                continue
            r = Mp.apply(A.matvec(z)) - nxt - sigma[k] * z
            worst = max(worst, float(np.linalg.norm(r)))
    return worst
