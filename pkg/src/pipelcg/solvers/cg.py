"""Classic (Hestenes-Stiefel) preconditioned CG: two blocking reductions per iteration."""
from __future__ import annotations

import math

import numpy as np

from ..errors import BreakdownError
from ..linalg import local_dots
from .common import (Instrument, SolveReport, as_array, as_matrix, as_preconditioner,
                     default_fabric, m_norm_residual, partition_for)

TRUE_RESIDUAL_FACTOR = 10.0


def classic_cg(A, M=None, b=None, x0=None, rtol: float = 1e-6, maxit: int = 10_000,
               fabric=None):
    """Solve ``Ax = b``; returns ``(x, SolveReport)``.

    Convergence is declared when ``||r_k|| / ||r_0|| < rtol`` in the
    ``M^{-1}`` norm.  Running out of iterations gives a report with
    ``converged=False``; a nonpositive curvature ``(p, Ap)`` raises
    :class:`BreakdownError`.
    """
    A = as_matrix(A)
    M = as_preconditioner(M, A)
    n = A.n
    b = as_array(b, n, "b")
    x = np.zeros(n) if x0 is None else as_array(x0, n, "x0").copy()
    if not rtol > 0:
        raise ValueError("rtol must be positive")
    fabric = default_fabric(fabric)
    part = partition_for(n, fabric)
    ins = Instrument(fabric)
    report = SolveReport(method="cg", rtol=rtol)

    r = b - A.matvec(x)
    ins.count("spmv")
    ins.count("axpys")
    # unpreconditioned CG keeps only r, p and Ap
    z = r if M.is_identity else M.apply(r)
    ins.count("preconditioner_applies")
    rho = float(ins.allreduce(local_dots(part, r, [z]), tag=-1)[0])
    ins.count("local_dots")
    norm0 = math.sqrt(max(rho, 0.0))
    report.initial_residual = norm0
    history = [norm0]
    p = z.copy()
    q = np.empty(n)

    converged = norm0 == 0.0
    k = 0
    while not converged and k < maxit:
        ins.begin_iteration(k)
        with ins.kernel_scope("K1"):
            A.matvec(p, out=q)
            ins.count("spmv")
        with ins.kernel_scope("K5"):
            partial = local_dots(part, p, [q])
            ins.count("local_dots")
            pq = float(ins.allreduce(partial, tag=2 * k)[0])
        if not pq > 0:
            ins.end_iteration()
            raise BreakdownError("pAp", pq, f"nonpositive curvature (p, Ap) = {pq!r}: A is not SPD")
        alpha = rho / pq
        with ins.kernel_scope("K6"):
            x += alpha * p
            r -= alpha * q
            ins.count("axpys", 2)
        with ins.kernel_scope("K1"):
            M.apply(r, out=z)
            ins.count("preconditioner_applies")
        with ins.kernel_scope("K5"):
            partial = local_dots(part, r, [z])
            ins.count("local_dots")
            rho_new = float(ins.allreduce(partial, tag=2 * k + 1)[0])
        history.append(math.sqrt(max(rho_new, 0.0)))
        with ins.kernel_scope("K6"):
            p *= rho_new / rho
            p += z
            ins.count("axpys")
        rho = rho_new
        ins.end_iteration()
        k += 1
        converged = history[-1] < rtol * norm0

    report.iterations = k
    report.recursive_residual_history = history
    report.work_vectors_high_water = 3 if M.is_identity else 4
    report.reason = "converged" if converged else "maxit"
    _finish(report, ins, A, M, b, x, converged, rtol)
    return x, report


def _finish(report, ins, A, M, b, x, converged, rtol, residual=None):
    """Shared epilogue: true residual, counters, timings.

    ``residual`` may carry an already computed ``m_norm_residual`` result.
    """
    ins.drain()
    ins.phase = "setup"
    if residual is None:
        residual = m_norm_residual(A, M, b, x)
        ins.setup_counters["spmv"] += 1
    res2, resm = residual
    report.true_final_residual = res2
    report.true_relative_residual = resm / report.initial_residual if report.initial_residual else 0.0
    if converged and report.true_relative_residual > TRUE_RESIDUAL_FACTOR * rtol:
        converged = False
        report.reason = "true residual check failed"
    report.converged = bool(converged)
    report.counters = dict(ins.counters)
    report.setup_counters = dict(ins.setup_counters)
    report.per_iteration_counters = ins.per_iteration
    report.kernel_times = dict(ins.kernel_times)
    report.time_unit = ins.time_unit
    report.total_time = ins.fabric.now()
    report.max_reductions_in_flight = ins.max_in_flight
    return report
