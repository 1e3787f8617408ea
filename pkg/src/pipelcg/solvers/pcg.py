"""Pipelined CG (p-CG): one reduction per iteration, hidden behind the SPMV.

Recurrences (preconditioned form, ``u = M^{-1} r``, ``w = A u``)::

    gamma = (r, u),  delta = (w, u)            # one non-blocking reduction
    m = M^{-1} w,  n = A m                     # overlapped with the reduction
    beta  = gamma / gamma_old                  # (0 on the first iteration)
    alpha = gamma / (delta - beta * gamma / alpha_old)
    z = n + beta z;  q = m + beta q;  s = w + beta s;  p = u + beta p
    x += alpha p;  r -= alpha s;  u -= alpha q;  w -= alpha z

Without a preconditioner ``u`` is ``r``, ``m`` is ``w`` and ``q`` is ``s``,
leaving six work vectors and 16N flops per iteration.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import BreakdownError
from ..linalg import local_dots
from .cg import _finish
from .common import (Instrument, SolveReport, as_array, as_matrix, as_preconditioner,
                     default_fabric, partition_for)


def pipelined_cg_ghysels(A, M=None, b=None, x0=None, rtol: float = 1e-6,
                         maxit: int = 10_000, fabric=None):
    """Solve ``Ax = b`` with p-CG; same contract as :func:`classic_cg`."""
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
    report = SolveReport(method="pcg", pipeline_length=1, rtol=rtol)
    plain = M.is_identity

    r = b - A.matvec(x)
    ins.count("spmv")
    ins.count("axpys")
    u = r if plain else M.apply(r)
    ins.count("preconditioner_applies")
    w = A.matvec(u)
    ins.count("spmv")
    z, s, p = np.zeros(n), np.zeros(n), np.zeros(n)
    q = s if plain else np.zeros(n)
    nvec = np.empty(n)

    history = []
    norm0 = None
    gamma_old = alpha_old = None
    converged = False
    i = 0
    while i <= maxit:
        ins.begin_iteration(i)
        with ins.kernel_scope("K5"):
            partial = local_dots(part, u, [r, w])
            ins.count("local_dots", 2)
            handle = ins.iallreduce(partial, tag=i)
        with ins.kernel_scope("K1"):
            m = w if plain else M.apply(w)
            ins.count("preconditioner_applies")
            A.matvec(m, out=nvec)
            ins.count("spmv")
        gamma, delta = ins.wait(handle)
        res = math.sqrt(max(gamma, 0.0))
        history.append(res)
        if norm0 is None:
            norm0 = res
        if res == 0.0 or res < rtol * norm0:
            converged = True
            ins.end_iteration()
            i += 1
            break
        with ins.kernel_scope("K3"):
            if gamma_old is None:
                beta, denom = 0.0, delta
            else:
                beta = gamma / gamma_old
                denom = delta - beta * gamma / alpha_old
            if not denom > 0:
                ins.end_iteration()
                raise BreakdownError("pAp", denom, f"nonpositive curvature {denom!r}: A is not SPD")
            alpha = gamma / denom
            ins.count("scalar")
        with ins.kernel_scope("K4"):
            z *= beta
            z += nvec
            if not plain:
                q *= beta
                q += m
            s *= beta
            s += w
            p *= beta
            p += u
            x += alpha * p
            r -= alpha * s
            if not plain:
                u -= alpha * q
            w -= alpha * z
            ins.count("axpys", 6 if plain else 8)
        gamma_old, alpha_old = gamma, alpha
        ins.end_iteration()
        i += 1

    report.initial_residual = norm0 or 0.0
    report.iterations = i
    report.recursive_residual_history = history
    report.work_vectors_high_water = 6 if plain else 9
    report.reason = "converged" if converged else "maxit"
    _finish(report, ins, A, M, b, x, converged, rtol)
    return x, report
