"""Classic CG, pipelined CG and p(l)-CG on the same Poisson problem.

In exact arithmetic all of them produce the same iterates.  In floating
point the deep pipelines drift a little from CG once the residual has
dropped a few orders of magnitude; this script prints both histories
side by side so the drift is visible.

    python3 demos/01_convergence.py
"""
import numpy as np

from pipelcg import classic_cg, pipelcg_solve, pipelined_cg_ghysels
from pipelcg.checks import history_deviation
from pipelcg.problems import laplacian_2d

A = laplacian_2d(30, 30)
b = np.random.default_rng(0).standard_normal(A.n)
rtol = 1e-8

_, ref = classic_cg(A, None, b, rtol=rtol, maxit=2000)
runs = {"cg": ref}
_, runs["pcg"] = pipelined_cg_ghysels(A, None, b, rtol=rtol, maxit=2000)
for l in (1, 2, 3):
    # the spectrum of the 2D Laplacian sits in (0, 8)
    _, runs[f"p({l})"] = pipelcg_solve(A, None, b, l=l, rtol=rtol, maxit=2000, lmin=0.0, lmax=8.0)

print(f"{'method':8s} {'iters':>6s} {'restarts':>8s} {'true rel. res':>14s} {'max dev vs cg':>14s}")
for name, rep in runs.items():
    dev = history_deviation(ref.recursive_residual_history, rep.recursive_residual_history,
                            floor=rtol * ref.initial_residual)
    print(f"{name:8s} {rep.iterations:6d} {rep.restarts:8d} {rep.true_relative_residual:14.3e} "
          f"{dev.max():14.3e}")

# p(l) reports residual norms with a lag of l iterations, so the histories
# are aligned by iterate, not by loop count
print("\nrelative residual every 20 iterates")
cols = list(runs)
print("  k  " + "".join(f"{c:>11s}" for c in cols))
for k in range(0, len(ref.recursive_residual_history), 20):
    row = []
    for c in cols:
        h = runs[c].relative_residual_history
        row.append(f"{h[k]:11.2e}" if k < len(h) else " " * 11)
    print(f"{k:4d} " + "".join(row))
