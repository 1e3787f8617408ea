"""How deep pipelining hides a slow global reduction.

Each reduction costs ``g`` ticks and each SPMV one tick.  Classic CG
waits for two reductions per iteration; p(l)-CG keeps up to ``l`` of
them in flight and only waits for the one started ``l`` iterations ago.
The analytic schedule is compared with a real solve driven by the
simulated clock fabric.

    python3 demos/02_latency_hiding.py
"""
import numpy as np

from pipelcg import make_fabric
from pipelcg.perfmodel import KernelCosts, simulate, speedup_table, validate_against_fabric
from pipelcg.problems import laplacian_2d
from pipelcg.solvers import solve

costs = KernelCosts(t_spmv=1.0, t_glred=10.0)

print("analytic model, g = 10, spmv = 1")
print(f"{'method':10s} {'ticks/it':>9s} {'speedup':>8s} {'in flight':>9s}")
cg = simulate("cg", 1, costs, 40)
print(f"{'cg':10s} {cg.steady_state_time_per_iteration:9.3f} {1.0:8.2f} {cg.max_in_flight():9d}")
for row in speedup_table(costs, [1, 2, 3, 5, 10]):
    l = row["l"]
    tr = simulate("pipelcg", l, costs, 10 * l + 20)
    print(f"{'p(%d)' % l:10s} {tr.steady_state_time_per_iteration:9.3f} {row['speedup']:8.2f} "
          f"{tr.max_in_flight():9d}")

# once l exceeds g / spmv there is nothing left to hide
print("\nspeedups when the reduction is as cheap as an SPMV:",
      [r["speedup"] for r in speedup_table(KernelCosts(t_spmv=1, t_glred=1), [1, 2, 3])])

print("\nsolver on the simulated clock (laplacian 30x30)")
A = laplacian_2d(30, 30)
b = np.random.default_rng(1).standard_normal(A.n)
for method, l in [("cg", 1), ("pcg", 1), ("pipelcg", 1), ("pipelcg", 2), ("pipelcg", 3)]:
    fabric = make_fabric(costs.fabric_config())
    kw = dict(l=l, lmin=0.0, lmax=8.0) if method == "pipelcg" else {}
    _, rep = solve(method, A, None, b, rtol=1e-14, maxit=50, fabric=fabric, **kw)
    d = validate_against_fabric(rep, fabric, costs)
    name = method if method != "pipelcg" else f"p({l})"
    print(f"  {name:8s} measured {d.measured:7.3f}  model {d.predicted:7.3f}  "
          f"reductions in flight {rep.max_reductions_in_flight}")

# a slice of the p(2) schedule: K2 of iteration i waits on the reduction from i - 2
tr = simulate("pipelcg", 2, costs, 12)
print("\np(2) schedule, iterations 4..6")
for e in tr.events:
    if 4 <= e.iteration <= 6:
        print(f"  {e.kernel:6s} it {e.iteration:2d}  [{e.start:6.2f}, {e.end:6.2f}]")
