"""Discrete-event model of the per-iteration kernel schedule.

Each method is a fixed sequence of local kernels plus global reductions.
Local work runs back to back on one critical path; a reduction completes
``t_glred`` after it is initiated and only blocks when it is waited on.
The schedules match, kernel for kernel, what the solvers charge to a
simulated-clock fabric, so a solver run can be checked against the model.

Steady-state time per iteration is averaged over a window that starts at
iteration ``2l`` (fill is over) and spans a multiple of ``l`` iterations,
which absorbs the period-``l`` pattern that staggered reductions produce.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

from .comm import FabricConfig
from .errors import ContractViolation

METHODS = ("cg", "pcg", "pipelcg")
CSV_FIELDS = ("kernel", "iteration", "start", "end")


@dataclass(frozen=True)
class KernelCosts:
    """Duration of one invocation of each kernel.  ``t_spmv`` includes the preconditioner."""

    t_spmv: float = 1.0
    t_glred: float = 0.0
    t_axpy: float = 0.0
    t_dot_local: float = 0.0
    t_scalar: float = 0.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ContractViolation(f"{name} must be finite and nonnegative, got {v!r}")

    def fabric_config(self, **kwargs) -> FabricConfig:
        """Simulated-clock fabric charging exactly these costs."""
        costs = {"spmv": self.t_spmv, "prec": 0.0, "axpy": self.t_axpy,
                 "dot_local": self.t_dot_local, "scalar": self.t_scalar}
        kwargs.setdefault("max_inflight", 64)
        return FabricConfig(backend="simulated_clock", latency=self.t_glred,
                            compute_costs=costs, **kwargs)


@dataclass
class ScheduleEvent:
    kernel: str
    start: float
    end: float
    iteration: int


@dataclass
class ScheduleTrace:
    method: str
    l: int
    costs: KernelCosts
    iterations: int
    events: list = field(default_factory=list)
    iteration_starts: list = field(default_factory=list)
    total_time: float = 0.0
    steady_state_time_per_iteration: float = 0.0
    fill_time: float = 0.0
    drain_time: float = 0.0

    @property
    def reductions(self) -> list:
        return [e for e in self.events if e.kernel == "GLRED"]

    def max_in_flight(self) -> int:
        return max_overlap((e.start, e.end) for e in self.reductions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["max_in_flight"] = self.max_in_flight()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for e in self.events:
            w.writerow([e.kernel, e.iteration, repr(float(e.start)), repr(float(e.end))])
        return buf.getvalue()


def max_overlap(intervals) -> int:
    """Largest number of half-open ``[start, end)`` intervals covering one instant."""
    points = []
    for s, e in intervals:
        if e > s:
            points += [(s, 1), (e, -1)]
    points.sort()
    best = cur = 0
    for _, step in points:
        cur += step
        best = max(best, cur)
    return best


def steady_state_rate(starts, l: int) -> float:
    """Mean iteration duration over ``[2l, 2l + k*l]`` for the largest ``k`` that fits."""
    i0 = 2 * l
    span = (len(starts) - 1 - i0) // l * l
    if span <= 0:
        raise ContractViolation(f"need at least {i0 + l + 1} iteration boundaries, got {len(starts)}")
    return (starts[i0 + span] - starts[i0]) / span


class _Sim:
    def __init__(self, costs: KernelCosts):
        self.c = costs
        self.t = 0.0
        self.events: list[ScheduleEvent] = []
        self.pending: dict[int, float] = {}

    def run(self, kernel, duration, it):
        if duration:
            self.events.append(ScheduleEvent(kernel, self.t, self.t + duration, it))
            self.t += duration

    def init(self, tag):
        done = self.t + self.c.t_glred
        self.pending[tag] = done
        self.events.append(ScheduleEvent("GLRED", self.t, done, tag))

    def wait(self, tag, it):
        done = self.pending.pop(tag)
        start = self.t
        self.t = max(self.t, done)
        self.events.append(ScheduleEvent("WAIT", start, self.t, it))


def _cg_iteration(sim: _Sim, i: int, preconditioned: bool):
    c = sim.c
    sim.run("K1", c.t_spmv, i)
    sim.run("K5", c.t_dot_local, i)
    sim.init(2 * i)
    sim.wait(2 * i, i)
    sim.run("K6", 2 * c.t_axpy, i)
    sim.run("K5", c.t_dot_local, i)
    sim.init(2 * i + 1)
    sim.wait(2 * i + 1, i)
    sim.run("K6", c.t_axpy, i)


def _pcg_iteration(sim: _Sim, i: int, preconditioned: bool):
    c = sim.c
    sim.run("K5", 2 * c.t_dot_local, i)
    sim.init(i)
    sim.run("K1", c.t_spmv, i)
    sim.wait(i, i)
    sim.run("K3", c.t_scalar, i)
    sim.run("K4", (8 if preconditioned else 6) * c.t_axpy, i)


def _pipelcg_iteration(sim: _Sim, i: int, l: int, preconditioned: bool):
    c = sim.c
    sim.run("K1", c.t_spmv + (c.t_axpy if i < l else 0.0), i)
    if i >= l:
        sim.wait(i - l, i)
        sim.run("K2", c.t_scalar, i)
        sim.run("K3", c.t_scalar, i)
        sim.run("K4", (2 * (l + 1) + (2 if preconditioned else 0)) * c.t_axpy, i)
    ndots = (1 if i - l + 1 >= 0 else 0) + (i + 2 - max(0, i - l + 2))
    sim.run("K5", ndots * c.t_dot_local, i)
    sim.init(i)
    if i >= l:
        sim.run("K6", c.t_scalar + (2 * c.t_axpy if i >= l + 1 else 0.0), i)


def simulate(method: str, l: int, costs: KernelCosts, iterations: int,
             preconditioned: bool = False) -> ScheduleTrace:
    """Play ``iterations`` loop iterations of ``method`` and return the schedule.

    ``l`` is ignored for ``cg`` and ``pcg`` apart from the steady-state
    window, which uses ``l = 1`` for them.
    """
    if method not in METHODS:
        raise ContractViolation(f"unknown method {method!r}")
    if l < 1:
        raise ContractViolation(f"pipeline length must be >= 1, got {l}")
    depth = l if method == "pipelcg" else 1
    if iterations < 3 * depth:
        raise ContractViolation(f"need at least {3 * depth} iterations to reach steady state")
    sim = _Sim(costs)
    starts = []
    for i in range(iterations):
        starts.append(sim.t)
        if method == "cg":
            _cg_iteration(sim, i, preconditioned)
        elif method == "pcg":
            _pcg_iteration(sim, i, preconditioned)
        else:
            _pipelcg_iteration(sim, i, l, preconditioned)
    end_of_loop = sim.t
    for tag in sorted(sim.pending):
        sim.wait(tag, iterations)
    boundaries = starts + [end_of_loop]
    rate = steady_state_rate(boundaries, depth)
    return ScheduleTrace(
        method=method, l=depth, costs=costs, iterations=iterations, events=sim.events,
        iteration_starts=starts, total_time=sim.t, steady_state_time_per_iteration=rate,
        fill_time=boundaries[2 * depth], drain_time=sim.t - end_of_loop)


def closed_form_time(method: str, l: int, costs: KernelCosts) -> float:
    """Closed-form steady-state time per iteration, local vector work neglected."""
    g, s = costs.t_glred, costs.t_spmv
    if method == "cg":
        return 2 * g + s
    if method == "pcg":
        return max(g, s)
    if method == "pipelcg":
        return max(g / l, s)
    raise ContractViolation(f"unknown method {method!r}")


def _rate(method, l, costs, preconditioned=False):
    depth = l if method == "pipelcg" else 1
    return simulate(method, l, costs, 6 * depth + 4, preconditioned).steady_state_time_per_iteration


def speedup_table(costs: KernelCosts, l_values, baseline: str = "cg", baseline_l: int = 1):
    """Rows ``{l, time_per_iteration, speedup}`` for p(l)-CG against ``baseline``."""
    base = _rate(baseline, baseline_l, costs)
    rows = []
    for l in l_values:
        t = _rate("pipelcg", l, costs)
        rows.append({"l": l, "time_per_iteration": t, "speedup": base / t if t else math.inf})
    return rows


@dataclass
class Discrepancy:
    method: str
    l: int
    predicted: float
    measured: float
    limit: float
    model_trace: ScheduleTrace | None = None
    fabric_trace: list | None = None

    @property
    def relative_error(self) -> float:
        if self.predicted == 0:
            return 0.0 if self.measured == 0 else math.inf
        return abs(self.measured - self.predicted) / self.predicted

    @property
    def ok(self) -> bool:
        return self.relative_error <= self.limit

    def summary(self) -> str:
        verdict = "ok" if self.ok else "FAIL"
        return (f"{self.method} l={self.l}: model {self.predicted:.6g}/iter, "
                f"solver {self.measured:.6g}/iter, rel. error {self.relative_error:.2%} "
                f"(limit {self.limit:.0%}) {verdict}")


def solver_iteration_starts(fabric) -> list[float]:
    """Iteration start times from the ``ITER`` marks a solver leaves in a fabric trace."""
    return [ev.start for ev in fabric.trace if ev.kind == "mark" and ev.label == "ITER"]


def validate_against_fabric(report, fabric, costs: KernelCosts, limit: float = 0.05,
                            preconditioned: bool = False) -> Discrepancy:
    """Compare a simulated-clock solver run with :func:`simulate` on the same costs.

    Both rates come from the same window of iteration start times.  On
    failure the returned object carries both traces for inspection.
    """
    if not fabric.simulated:
        raise ContractViolation("validation needs a solver run on the simulated clock")
    method, l = report.method, max(report.pipeline_length, 1)
    depth = l if method == "pipelcg" else 1
    starts = solver_iteration_starts(fabric)
    model = simulate(method, l, costs, max(len(starts), 3 * depth), preconditioned)
    predicted = steady_state_rate(model.iteration_starts[:len(starts)], depth)
    measured = steady_state_rate(starts, depth)
    d = Discrepancy(method, l, predicted, measured, limit)
    if not d.ok:
        d.model_trace, d.fabric_trace = model, list(fabric.trace)
    return d
