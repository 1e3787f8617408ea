"""Shifts, square-root breakdowns and restarts.

The auxiliary bases of p(l)-CG are polynomials of degree up to ``l`` in
the operator.  With zero shifts those polynomials are monomials and the
bases become badly conditioned as ``l`` grows; Chebyshev shifts over the
spectral interval keep them well scaled.  When the Cholesky-like update
of the basis transform meets a negative square-root argument the solver
restarts from its last good iterate.

    python3 demos/03_stability.py
"""
import numpy as np

from pipelcg import SparseMatrix, chebyshev_shifts, estimate_spectrum, pipelcg_solve
from pipelcg.problems import laplacian_2d

A = laplacian_2d(40, 40)
b = np.random.default_rng(2).standard_normal(A.n)

lo, hi = estimate_spectrum(A, None, iters=50)
print(f"estimated spectrum [{lo:.4f}, {hi:.4f}]  (exact upper bound < 8)")
print("chebyshev shifts, l = 3:", np.round(chebyshev_shifts(0.0, hi, 3), 4))

print(f"\n{'l':>2s} {'shifts':>10s} {'iters':>6s} {'restarts':>8s} {'breakdowns':>10s} {'true rel. res':>14s}")
for l in (1, 2, 3, 4, 6):
    for label, kw in [("chebyshev", dict(lmin=0.0, lmax=hi)), ("zero", dict(sigma=[0.0] * l))]:
        _, rep = pipelcg_solve(A, None, b, l=l, rtol=1e-10, maxit=3000, **kw)
        print(f"{l:2d} {label:>10s} {rep.iterations:6d} {rep.restarts:8d} {len(rep.breakdowns):10d} "
              f"{rep.true_relative_residual:14.3e}")

# a deliberately hostile case: twelve orders of magnitude of spectrum
# and monomial bases.  The solver gives up after its restart budget and
# says so instead of reporting a fake convergence.
D = SparseMatrix.from_dense(np.diag(np.logspace(0, 12, 40)))
_, rep = pipelcg_solve(D, None, np.ones(40), l=3, sigma=[0.0] * 3, rtol=1e-10, maxit=400)
print(f"\nill-conditioned diagonal: converged={rep.converged}, restarts={rep.restarts}, "
      f"reason={rep.reason!r}")
print(f"true relative residual {rep.true_relative_residual:.3e}")
