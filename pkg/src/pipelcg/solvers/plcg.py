"""Deep pipelined Conjugate Gradients, p(l)-CG.

Each global reduction started in iteration ``i`` is only waited on in
iteration ``i + l``, so up to ``l`` reductions overlap with the SPMVs (and
with each other) of the following iterations.

Notation used throughout this module (``j`` is a basis index, ``i`` the
loop counter, ``c = i - l + 1`` the column of ``G`` finished in iteration
``i``):

* ``z[k][j]`` -- vector ``j`` of auxiliary basis ``k``; ``z[0]`` is the
  Lanczos basis ``V`` and ``z[l]`` runs ``l`` SPMVs ahead of it.
* ``u[j] = M z[l][j]`` -- unpreconditioned twin of ``z[l]`` (shares storage
  with ``z[l]`` when there is no preconditioner).
* ``G`` -- banded upper-triangular transform with ``Z = V G``, bandwidth
  ``2l + 1``.  Its columns arrive as raw dot products and are turned into
  Cholesky-like factors of ``Z^T M Z`` once they land.
* ``gamma``/``delta`` -- diagonal/off-diagonal of the Lanczos tridiagonal
  ``T``; ``lu_lambda``/``lu_eta`` its LU factors; ``zeta`` the recursive
  residual norms.

The per-iteration kernel order is K1 (SPMV + preconditioner), wait for the
reduction started ``l`` iterations ago, K2 (finish a column of G), K3 (new
column of T), K4 (basis recurrences), K5 (local dots + initiate reduction),
K6 (LU step, search direction, iterate).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import BreakdownError, ContractViolation
from ..linalg import block_partition, local_dots
from .cg import TRUE_RESIDUAL_FACTOR, _finish
from .common import (Instrument, SolveReport, as_array, as_matrix, as_preconditioner,
                     chebyshev_shifts, default_fabric, estimate_spectrum, m_norm_residual)

__all__ = [
    "BREAKDOWN_TOL",
    "BandedG",
    "TransformState",
    "BasisWindow",
    "receive_column",
    "g_column_correction",
    "t_column_update",
    "lu_advance",
    "basis_vector_updates",
    "solution_update",
    "dot_product_batch",
    "restart",
    "pipelcg_solve",
]

# root arguments within this fraction of the raw diagonal are treated as exactly zero
BREAKDOWN_TOL = 1e-14
DEFAULT_RESTART_BUDGET = 10


class BandedG:
    """Upper-triangular matrix with bandwidth ``2l + 1``, grown column by column.

    Reads outside the band, or with a negative index, return 0.
    """

    def __init__(self, l: int):
        self.l = l
        self._cols: dict[int, np.ndarray] = {}

    def in_band(self, j: int, i: int) -> bool:
        return 0 <= j <= i and j >= i - 2 * self.l

    def __getitem__(self, key) -> float:
        j, i = key
        if not self.in_band(j, i):
            return 0.0
        col = self._cols.get(i)
        return 0.0 if col is None else float(col[j - i + 2 * self.l])

    def __setitem__(self, key, value):
        j, i = key
        if not self.in_band(j, i):
            raise ContractViolation(f"G[{j}, {i}] lies outside the band")
        col = self._cols.get(i)
        if col is None:
            col = self._cols[i] = np.zeros(2 * self.l + 1)
        col[j - i + 2 * self.l] = value

    @property
    def ncols(self) -> int:
        return max(self._cols, default=-1) + 1

    def to_dense(self, ncols: int | None = None) -> np.ndarray:
        ncols = self.ncols if ncols is None else ncols
        out = np.zeros((ncols, ncols))
        for i in range(ncols):
            for j in range(max(0, i - 2 * self.l), i + 1):
                out[j, i] = self[j, i]
        return out


def _at(d: dict, k: int) -> float:
    return d.get(k, 0.0) if k >= 0 else 0.0


@dataclass
class TransformState:
    """Scalars of one pipeline cycle: ``G``, ``T``, its LU factors and ``zeta``."""

    l: int
    sigma: np.ndarray
    zeta0: float = 1.0
    G: BandedG = None
    gamma: dict = field(default_factory=dict)
    delta: dict = field(default_factory=dict)
    lu_lambda: dict = field(default_factory=dict)
    lu_eta: dict = field(default_factory=dict)
    zeta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if self.sigma.size != self.l:
            raise ContractViolation(f"need {self.l} shifts, got {self.sigma.size}")
        if self.G is None:
            self.G = BandedG(self.l)
            self.G[0, 0] = 1.0

    def tridiagonal(self, ncols: int | None = None) -> np.ndarray:
        """Dense ``T_{m+1,m}`` from the stored gamma/delta (``m`` = columns)."""
        m = len(self.gamma) if ncols is None else ncols
        T = np.zeros((m + 1, m))
        for j in range(m):
            T[j, j] = self.gamma[j]
            T[j + 1, j] = self.delta[j]
            if j + 1 < m:
                T[j, j + 1] = self.delta[j]
        return T


class _Ring:
    """Fixed number of vector slots; index ``j`` lives in slot ``j % size``."""

    def __init__(self, size: int, n: int, owner, aux: bool = False):
        self.size, self.n = size, n
        self._owner, self._aux = owner, aux
        self._labels = [-1] * size
        self._bufs: list[np.ndarray | None] = [None] * size

    def get(self, j: int) -> np.ndarray:
        s = j % self.size
        if j < 0 or self._labels[s] != j:
            raise ContractViolation(f"basis vector {j} is not in the window (holds {self._labels})")
        return self._bufs[s]

    def claim(self, j: int) -> np.ndarray:
        s = j % self.size
        if self._bufs[s] is None:
            self._bufs[s] = np.empty(self.n)
            self._owner._allocated(self._aux)
        self._labels[s] = j
        return self._bufs[s]


class BasisWindow:
    """Rolling storage for the auxiliary bases, ``u`` and the search direction.

    Bases ``0..l-1`` keep their three most recent vectors.  Basis ``l``
    keeps ``max(3, l)``: three for its own recurrence, ``l`` for the dot
    products.  The allocation counters record how many distinct vectors
    were ever live; ``u`` is counted separately because it only exists
    when a preconditioner is used.
    """

    def __init__(self, n: int, l: int, separate_u: bool = False, record: bool = False):
        self.n, self.l = n, l
        self.basis_allocated = 0
        self.aux_allocated = 0
        self.z = [_Ring(3, n, self) for _ in range(l)] + [_Ring(max(3, l), n, self)]
        self.u = _Ring(3, n, self, aux=True) if separate_u else self.z[l]
        self.separate_u = separate_u
        self._p: np.ndarray | None = None
        self.p_index: int | None = None
        self.x_index = 0
        self.recorded = [dict() for _ in range(l + 1)] if record else None

    def _allocated(self, aux: bool):
        if aux:
            self.aux_allocated += 1
        else:
            self.basis_allocated += 1

    @property
    def p(self) -> np.ndarray:
        if self._p is None:
            self._p = np.empty(self.n)
            self.basis_allocated += 1
        return self._p

    def record(self, k: int, j: int):
        if self.recorded is not None:
            self.recorded[k][j] = self.z[k].get(j).copy()

    def recorded_basis(self, k: int) -> np.ndarray:
        """Columns ``z[k][0], z[k][1], ...`` (contiguous prefix) as an ``n x m`` array."""
        rec = self.recorded[k]
        m = 0
        while m in rec:
            m += 1
        return np.column_stack([rec[j] for j in range(m)]) if m else np.zeros((self.n, 0))


# -- sub-operations -------------------------------------------------------

def receive_column(state: TransformState, i: int, l: int, payload) -> None:
    """Store the reduced dots for column ``c = i-l+1``, filling the rest by symmetry.

    Rows ``c-l .. c`` were computed as dot products; rows ``c-2l .. c-l-1``
    equal ``G[c-l, j+l]`` because ``G`` is symmetric about its ``l``-th
    upper diagonal.
    """
    G = state.G
    c = i - l + 1
    for s in range(2 * l + 1):
        j = c - 2 * l + s
        if j < 0:
            continue
        G[j, c] = payload[s] if j >= c - l else G[c - l, j + l]


def g_column_correction(G: BandedG, i: int, l: int, tol: float = BREAKDOWN_TOL) -> float:
    """Turn raw column ``c = i-l+1`` of ``G`` into its final value; return ``G[c, c]``.

    Raises :class:`BreakdownError` (``where='sqrt'``) when the root argument
    is negative beyond ``tol`` relative to the raw diagonal.  Arguments
    within that band are set to exactly 0, which the caller treats as an
    invariant Krylov subspace.
    """
    c = i - l + 1
    lo = max(0, c - 2 * l)
    for j in range(max(0, c - l + 1), c):
        gjj = G[j, j]
        if gjj == 0.0:
            raise BreakdownError("g_diag", gjj)
        acc = G[j, c]
        for k in range(lo, j):
            acc -= G[k, j] * G[k, c]
        G[j, c] = acc / gjj
    raw = G[c, c]
    arg = raw
    for k in range(lo, c):
        arg -= G[k, c] ** 2
    if arg < -tol * abs(raw):
        raise BreakdownError("sqrt", arg, f"square root breakdown in column {c}: argument {arg!r}")
    if abs(arg) <= tol * abs(raw):
        arg = 0.0
    G[c, c] = math.sqrt(arg)
    return G[c, c]


def t_column_update(state: TransformState, i: int, l: int) -> tuple[float, float]:
    """Append ``gamma[i-l]`` and ``delta[i-l]`` to ``T``."""
    G, j = state.G, i - l
    gjj = G[j, j]
    if gjj == 0.0:
        raise BreakdownError("g_diag", gjj)
    # the delta[j-1] term is absent for the very first column
    back = G[j - 1, j] * _at(state.delta, j - 1) if j >= 1 else 0.0
    if i < 2 * l:
        gamma = (G[j, j + 1] + state.sigma[j] * gjj - back) / gjj
        delta = G[j + 1, j + 1] / gjj
    else:
        gamma = (gjj * state.gamma[j - l] + G[j, j + 1] * state.delta[j - l] - back) / gjj
        delta = G[j + 1, j + 1] * state.delta[j - l] / gjj
    state.gamma[j] = gamma
    state.delta[j] = delta
    return gamma, delta


def lu_advance(state: TransformState, i: int, l: int) -> tuple[float, float, float]:
    """One step of the LU factorization of ``T``; returns ``(lambda, eta, zeta)``."""
    j = i - l
    if j == 0:
        lam, eta, zeta = 0.0, state.gamma[0], state.zeta0
    else:
        eta_prev = state.lu_eta[j - 1]
        if eta_prev == 0.0:
            raise BreakdownError("eta", eta_prev)
        lam = state.delta[j - 1] / eta_prev
        eta = state.gamma[j] - lam * state.delta[j - 1]
        zeta = -lam * state.zeta[j - 1]
    if eta == 0.0:
        raise BreakdownError("eta", eta)
    state.lu_lambda[j], state.lu_eta[j], state.zeta[j] = lam, eta, zeta
    return lam, eta, zeta


def basis_vector_updates(window: BasisWindow, state: TransformState, i: int, l: int,
                         ins: Instrument | None = None) -> None:
    """Add one vector to every basis using ``gamma[i-l]``, ``delta[i-l]``, ``delta[i-l-1]``.

    Bases ``k < l`` use the SPMV-free form driven by basis ``k+1``; basis
    ``l`` (and ``u``) finish the recurrence started by this iteration's
    SPMV, which already sits in ``z[l][i+1]``.
    """
    j = i - l
    gam, dl, dlm = state.gamma[j], state.delta[j], _at(state.delta, j - 1)
    if dl == 0.0:
        raise BreakdownError("delta", dl)
    for k in range(l):
        idx = j + k + 1
        prev = window.z[k].get(idx - 1)
        ahead = window.z[k + 1].get(idx)
        new = window.z[k].claim(idx)
        np.multiply(prev, state.sigma[k] - gam, out=new)
        new += ahead
        if dlm:
            new -= dlm * window.z[k].get(idx - 2)
        new /= dl
        window.record(k, idx)
    _three_term(window.z[l], i, gam, dl, dlm)
    window.record(l, i + 1)
    nax = 2 * (l + 1)
    if window.separate_u:
        _three_term(window.u, i, gam, dl, dlm)
        nax += 2
    if ins is not None:
        ins.count("axpys", nax)


def _three_term(ring: _Ring, i: int, gam: float, dl: float, dlm: float):
    v = ring.get(i + 1)
    v -= gam * ring.get(i)
    if dlm:
        v -= dlm * ring.get(i - 1)
    v /= dl


def solution_update(window: BasisWindow, state: TransformState, i: int, l: int,
                    x: np.ndarray, ins: Instrument | None = None) -> None:
    """Advance ``x`` to ``x[i-l]`` and form ``p[i-l]`` (in place)."""
    j = i - l
    eta = state.lu_eta[j]
    v = window.z[0].get(j)
    p = window.p
    if j == 0:
        np.divide(v, eta, out=p)
    else:
        # x uses the old direction, so update it before overwriting p
        x += state.zeta[j - 1] * p
        p *= -state.delta[j - 1]
        p += v
        p /= eta
        if ins is not None:
            ins.count("axpys", 2)
    window.p_index = window.x_index = j


def dot_product_batch(window: BasisWindow, i: int, l: int, reducer, partition=None,
                      tag: int | None = None):
    """Start the reduction for column ``i+1`` of ``G``; returns the handle.

    Only ``l + 1`` dots are computed locally: ``(u[i+1], z[l][j])`` for
    ``j = i-l+2 .. i+1`` and ``(u[i+1], z[0][i-l+1])``.  They travel in a
    ``2l+1`` slot payload ``G(i-2l+1 : i+1, i+1)``; the remaining slots are
    zero and are filled by symmetry when the column arrives.
    ``reducer`` is an :class:`Instrument` or a bare fabric.
    """
    if partition is None:
        partition = block_partition(window.n, getattr(reducer, "fabric", reducer).ranks)
    u = window.u.get(i + 1)
    vectors, slots = [], []
    base = i + 1 - 2 * l
    if i - l + 1 >= 0:
        vectors.append(window.z[0].get(i - l + 1))
        slots.append(i - l + 1 - base)
    for j in range(max(0, i - l + 2), i + 2):
        vectors.append(window.z[l].get(j))
        slots.append(j - base)
    partials = np.zeros((len(partition) - 1, 2 * l + 1))
    partials[:, slots] = local_dots(partition, u, vectors)
    if isinstance(reducer, Instrument):
        reducer.count("local_dots", len(vectors))
    return reducer.iallreduce(partials, i if tag is None else tag)


def restart(A, M, b, x, l, sigma, partition, ins: Instrument | None = None, record=False):
    """Fresh pipeline from iterate ``x``: ``(window, state, sqrt((u0, r0)))``.

    Used both for the initial fill and after a breakdown.
    """
    u0 = b - A.matvec(x)
    r0 = M.apply(u0)
    partial = local_dots(partition, u0, [r0])
    if ins is not None:
        ins.count("spmv")
        ins.count("axpys")
        ins.count("preconditioner_applies")
        ins.count("local_dots")
        rho = float(ins.allreduce(partial, tag=-1)[0])
    else:
        rho = float(partial.sum())
    norm = math.sqrt(max(rho, 0.0))
    window = BasisWindow(A.n, l, separate_u=not M.is_identity, record=record)
    state = TransformState(l, sigma, zeta0=norm)
    if norm == 0.0:
        return window, state, 0.0
    for k in range(l + 1):
        np.divide(r0, norm, out=window.z[k].claim(0))
        window.record(k, 0)
    if window.separate_u:
        np.divide(u0, norm, out=window.u.claim(0))
    return window, state, norm


# -- driver ---------------------------------------------------------------

class _Restart(Exception):
    def __init__(self, where, value, iteration):
        self.where, self.value, self.iteration = where, value, iteration


def pipelcg_solve(A, M=None, b=None, x0=None, l: int = 1, rtol: float = 1e-6,
                  maxit: int = 10_000, sigma=None, fabric=None, *, lmin: float = 0.0,
                  lmax: float | None = None, restart_budget: int = DEFAULT_RESTART_BUDGET,
                  breakdown_tol: float = BREAKDOWN_TOL, force_restart_at=(), record=None):
    """Solve ``Ax = b`` with p(l)-CG; returns ``(x, SolveReport)``.

    Parameters
    ----------
    l : pipeline length (>= 1).
    sigma : the ``l`` basis shifts.  Default: Chebyshev shifts on
        ``[lmin, lmax]``, with ``lmax`` estimated by 10 power iterations
        on ``M^{-1}A`` when not given.
    maxit : cap on the number of iterates produced (summed over restarts).
    restart_budget : square-root breakdowns (or other breakdowns) trigger
        an explicit restart from the latest iterate; after this many the
        solve gives up with ``converged=False``.
    force_restart_at : global loop iterations at which to restart as if a
        breakdown had happened (testing aid).
    record : optional dict; receives ``cycles`` -- a list of
        ``{"window", "state", "first_iteration"}`` with every basis vector
        kept, for explicit-basis checks at small scale.
    """
    A = as_matrix(A)
    M = as_preconditioner(M, A)
    n = A.n
    b = as_array(b, n, "b")
    x = np.zeros(n) if x0 is None else as_array(x0, n, "x0").copy()
    if l < 1:
        raise ContractViolation(f"pipeline length must be >= 1, got {l}")
    if not rtol > 0:
        raise ValueError("rtol must be positive")
    if sigma is None:
        if lmax is None:
            _, lmax = estimate_spectrum(A, M, iters=10)
        sigma = chebyshev_shifts(lmin, lmax, l)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if sigma.size != l:
        raise ContractViolation(f"need {l} shifts, got {sigma.size}")
    fabric = default_fabric(fabric)
    if fabric.max_inflight < l:
        raise ContractViolation(f"fabric allows {fabric.max_inflight} reductions in flight, p({l}) needs {l}")
    part = block_partition(n, fabric.ranks)
    ins = Instrument(fabric)
    report = SolveReport(method="pipelcg", pipeline_length=l, rtol=rtol, shifts=sigma.tolist())
    force = set(force_restart_at)
    cycles = []
    history: list[float] = []
    norm0 = None
    it = 0          # global loop counter, also the reduction tag
    updates = 0     # iterates produced
    converged = False
    reason = ""
    residual = None
    best = None     # (norm, x) of the best cycle starting point

    while True:
        ins.phase = "setup"
        window, state, norm = restart(A, M, b, x, l, sigma, part, ins, record is not None)
        cycles.append({"window": window, "state": state, "first_iteration": it})
        if norm0 is None:
            norm0 = norm
            report.initial_residual = norm
        if best is None or norm < best[0]:
            best = (norm, x.copy())
        if norm == 0.0 or norm < rtol * norm0:
            history.append(norm)
            converged, reason = True, "converged"
            residual = m_norm_residual(A, M, b, x)
            ins.setup_counters["spmv"] += 1
            break
        handles = {}
        outcome = None
        i = 0
        try:
            while outcome is None:
                ins.begin_iteration(it)
                try:
                    if it in force:
                        force.discard(it)
                        raise _Restart("forced", 0.0, it)
                    outcome = _iteration(A, M, window, state, x, i, l, it, part, ins, handles,
                                         history, norm0, rtol, breakdown_tol)
                finally:
                    ins.end_iteration()
                it += 1
                i += 1
                if outcome == "updated":
                    updates += 1
                    outcome = "maxit" if updates >= maxit else None
        except BreakdownError as exc:
            outcome = _Restart(exc.where, exc.value, it)
            it += 1
        except _Restart as exc:
            outcome = exc
            it += 1

        if isinstance(outcome, _Restart) or outcome == "candidate":
            if outcome == "candidate":
                # recursive criterion met: confirm against the true residual
                ins.phase = "setup"
                residual = m_norm_residual(A, M, b, x)
                ins.setup_counters["spmv"] += 1
                if residual[1] <= TRUE_RESIDUAL_FACTOR * rtol * norm0:
                    converged, reason = True, "converged"
                    break
                outcome = _Restart("residual_gap", residual[1] / norm0, it - 1)
            else:
                _catch_up_iterate(window, state, x)
            ins.drain()
            report.breakdowns.append({"iteration": outcome.iteration, "where": outcome.where,
                                      "value": float(outcome.value)})
            report.restarts += 1
            if report.restarts > restart_budget:
                reason = "restart budget exhausted"
                # a run of breakdowns can leave x worse than where it started
                residual = m_norm_residual(A, M, b, x)
                ins.setup_counters["spmv"] += 1
                if residual[1] > best[0]:
                    x[...] = best[1]
                    residual = None
                break
            continue
        reason = "maxit"
        break

    ins.drain()
    report.iterations = it
    report.recursive_residual_history = history
    report.reason = reason
    report.work_vectors_high_water = max(c["window"].basis_allocated for c in cycles)
    report.aux_vectors_high_water = max(c["window"].aux_allocated for c in cycles)
    if record is not None:
        record["cycles"] = cycles
    _finish(report, ins, A, M, b, x, converged, rtol, residual=residual)
    return x, report


def _catch_up_iterate(window, state, x):
    """Before a restart, move ``x`` to the newest iterate the scalars allow."""
    j = window.p_index
    if j is not None and j in state.zeta and window.x_index == j:
        x += state.zeta[j] * window.p
        window.x_index = j + 1


def _iteration(A, M, window, state, x, i, l, tag, part, ins, handles, history, norm0, rtol, tol):
    """Run loop iteration ``i`` of the current cycle.

    Returns ``None`` (still filling), ``"updated"`` (a new iterate that is
    not converged) or ``"candidate"`` (recursive residual below ``rtol``).
    """
    sigma = state.sigma
    with ins.kernel_scope("K1"):
        target = window.u.claim(i + 1)
        A.matvec(window.z[l].get(i), out=target)
        ins.count("spmv")
        if i < l:
            target -= sigma[i] * window.u.get(i)
            ins.count("axpys")
        if window.separate_u:
            M.apply(target, out=window.z[l].claim(i + 1))
        ins.count("preconditioner_applies")
        if i < l:
            window.record(l, i + 1)
        if i < l - 1:
            for k in range(i + 1, l):
                window.z[k].claim(i + 1)[...] = window.z[l].get(i + 1)
                window.record(k, i + 1)

    lucky = False
    if i >= l:
        payload = ins.wait(handles.pop(tag - l))
        with ins.kernel_scope("K2"):
            receive_column(state, i, l, payload)
            g_column_correction(state.G, i, l, tol)
            ins.count("scalar")
        with ins.kernel_scope("K3"):
            _, delta = t_column_update(state, i, l)
            ins.count("scalar")
        lucky = delta == 0.0
        if not lucky:
            with ins.kernel_scope("K4"):
                basis_vector_updates(window, state, i, l, ins)

    if not lucky:
        with ins.kernel_scope("K5"):
            handles[tag] = dot_product_batch(window, i, l, ins, part, tag=tag)

    if i < l:
        return None
    with ins.kernel_scope("K6"):
        j = i - l
        _, _, zeta = lu_advance(state, i, l)
        ins.count("scalar")
        solution_update(window, state, i, l, x, ins)
        history.append(abs(zeta))
        if lucky:
            # invariant subspace: the next iterate is exact, its residual vanishes
            x += zeta * window.p
            window.x_index = j + 1
            history.append(0.0)
            return "candidate"
    if j == 0:
        return None
    return "candidate" if abs(zeta) < rtol * norm0 else "updated"
