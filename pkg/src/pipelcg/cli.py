"""``pipelcg-bench``: run, compare and model CG variants from the command line.

Subcommands::

    run       solve one problem, write report.json / kernels.csv / history.csv
    compare   solve the same problem with several methods, one table row each
    simulate  play the kernel schedule through the performance model

Exit status: 0 converged (or a successful model run), 2 bad usage or
input, 3 the solve did not converge, 4 ``--validate`` found a violation.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checks
from .comm import BACKENDS, FabricConfig, make_fabric, max_concurrent_reductions, parse_keyvalue_text
from .errors import BreakdownError, ContractViolation
from .linalg import MatrixMarketError
from .perfmodel import (KernelCosts, simulate, solver_iteration_starts, steady_state_rate,
                        validate_against_fabric)
from .problems import ProblemSpec, build_problem
from .solvers import KERNELS, METHODS, classic_cg, pipelcg_solve, solve

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_VALIDATION = 0, 2, 3, 4

KERNEL_CSV_FIELDS = ("kernel", "time", "unit")
HISTORY_CSV_FIELDS = ("iteration", "recursive_residual", "relative_residual")
COMPARE_FIELDS = ("label", "method", "l", "converged", "iterations", "restarts",
                  "reductions_initiated", "total_time", "time_per_iteration", "time_unit",
                  *KERNELS, "GLRED_wait", "speedup", "total_speedup")

# option name -> (RunConfig field, converter)
_RUN_KEYS = {
    "problem": ("problem", str), "rhs": ("rhs", str), "seed": ("seed", int),
    "method": ("method", str), "pipel": ("l", int), "l": ("l", int),
    "lmin": ("lmin", float), "lmax": ("lmax", float), "shifts": ("shifts", str),
    "rtol": ("rtol", float), "maxit": ("maxit", int), "pc": ("pc", str),
    "output": ("output", str), "label": ("label", str),
}
_FABRIC_KEYS = ("backend", "ranks", "latency", "jitter", "max_inflight", "progress")


@dataclass
class RunConfig:
    """Everything one solve needs.  ``shifts`` is a list, or ``None`` for Chebyshev."""

    problem: ProblemSpec = field(default_factory=ProblemSpec)
    method: str = "pipelcg"
    l: int = 1
    rtol: float = 1e-6
    maxit: int = 10_000
    pc: str = "jacobi"
    lmin: float = 0.0
    lmax: float | None = None
    shifts: list | None = None
    fabric: FabricConfig = field(default_factory=FabricConfig)
    output: tuple = ("json", "csv")
    seed: int = 0
    label: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractViolation(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.method == "pipelcg" and self.l < 1:
            raise ContractViolation("pipeline length must be >= 1")
        if not 0 < self.rtol < 1:
            raise ContractViolation(f"rtol must lie in (0, 1), got {self.rtol}")
        if self.maxit < 1:
            raise ContractViolation("maxit must be >= 1")
        if self.pc not in ("jacobi", "none"):
            raise ContractViolation(f"preconditioner must be 'jacobi' or 'none', got {self.pc!r}")
        if self.shifts is not None and self.method == "pipelcg" and len(self.shifts) != self.l:
            raise ContractViolation(f"{len(self.shifts)} shifts given for pipeline length {self.l}")
        bad = set(self.output) - {"json", "csv"}
        if bad:
            raise ContractViolation(f"unknown output format(s) {sorted(bad)}")
        if not self.label:
            self.label = self.method if self.method != "pipelcg" else f"pipelcg:{self.l}"

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        """Build from ``key -> value`` strings (RUNCONFIG files and flag overrides)."""
        run, fab = {}, {}
        for key, raw in mapping.items():
            key = key.strip().replace("-", "_")
            if key in _RUN_KEYS:
                name, conv = _RUN_KEYS[key]
                run[name] = raw if not isinstance(raw, str) else (raw.strip() if conv is str else conv(raw))
            elif key in _FABRIC_KEYS or key.startswith("cost_"):
                fab[key] = raw
            else:
                raise ContractViolation(f"unknown RUNCONFIG key {key!r}")
        seed = int(run.get("seed", 0))
        problem = ProblemSpec.parse(run.pop("problem", "laplacian2d:100x100"),
                                    rhs=run.pop("rhs", "ones"), seed=seed)
        if isinstance(run.get("shifts"), str):
            run["shifts"] = parse_shifts(run["shifts"])
        if isinstance(run.get("output"), str):
            run["output"] = parse_output(run["output"])
        fab.setdefault("seed", seed)
        return cls(problem=problem, fabric=FabricConfig.from_mapping(fab), **run)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["problem"] = self.problem.label()
        d["output"] = list(self.output)
        return d


def parse_shifts(text: str):
    text = text.strip()
    if text in ("", "auto", "chebyshev"):
        return None
    return [float(s) for s in text.split(",")]


def parse_output(text: str) -> tuple:
    text = text.strip().lower()
    return ("json", "csv") if text in ("both", "all") else tuple(s.strip() for s in text.split(","))


# -- running --------------------------------------------------------------

@dataclass
class RunResult:
    config: RunConfig
    x: np.ndarray
    report: object
    fabric: object
    time_per_iteration: float


def execute(config: RunConfig, record: dict | None = None) -> RunResult:
    """Solve the configured problem; the fabric is closed before returning."""
    A, b = build_problem(config.problem)
    M = None if config.pc == "none" else "jacobi"
    fabric = make_fabric(config.fabric)
    try:
        kwargs = dict(rtol=config.rtol, maxit=config.maxit, fabric=fabric)
        if config.method == "pipelcg":
            x, report = pipelcg_solve(A, M, b, l=config.l, sigma=config.shifts, lmin=config.lmin,
                                      lmax=config.lmax, record=record, **kwargs)
        else:
            x, report = solve(config.method, A, M, b, **kwargs)
    finally:
        fabric.close()
    return RunResult(config, x, report, fabric, _time_per_iteration(report, fabric))


def _time_per_iteration(report, fabric) -> float:
    depth = report.pipeline_length if report.method == "pipelcg" else 1
    starts = solver_iteration_starts(fabric)
    try:
        return float(steady_state_rate(starts, depth))
    except ContractViolation:
        return report.total_time / report.iterations if report.iterations else 0.0


def history_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_CSV_FIELDS)
    rel = report.relative_residual_history
    for k, (h, r) in enumerate(zip(report.recursive_residual_history, rel)):
        w.writerow([k, repr(float(h)), repr(float(r))])
    return buf.getvalue()


def kernels_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(KERNEL_CSV_FIELDS)
    for k in (*KERNELS, "GLRED_wait"):
        w.writerow([k, repr(float(report.kernel_times.get(k, 0.0))), report.time_unit])
    return buf.getvalue()


def report_document(result: RunResult) -> dict:
    doc = result.report.to_dict()
    doc["config"] = result.config.to_dict()
    doc["time_per_iteration"] = result.time_per_iteration
    return doc


def write_outputs(result: RunResult, outdir: Path) -> list[Path]:
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in result.config.output:
        p = outdir / "report.json"
        p.write_text(json.dumps(report_document(result), indent=2, sort_keys=True, default=_jsonable) + "\n")
        written.append(p)
    if "csv" in result.config.output:
        for name, text in (("kernels.csv", kernels_csv(result.report)),
                           ("history.csv", history_csv(result.report))):
            p = outdir / name
            p.write_text(text)
            written.append(p)
    return written


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


# -- validation -------------------------------------------------------------

VALIDATION_RTOL = 1e-6


def validation_suite(config: RunConfig, result: RunResult) -> list[tuple[str, bool, str]]:
    """Invariant checks on a finished run: ``(name, passed, detail)`` per check."""
    rep = result.report
    out = []
    it = max(rep.iterations, 1)
    per_iter = rep.counters["reductions_initiated"] / it
    want = 2 if rep.method == "cg" else 1
    out.append(("reductions per iteration", per_iter == want, f"{per_iter:g} (expected {want})"))

    if rep.converged:
        ok = rep.true_relative_residual <= 10 * rep.rtol
        out.append(("true residual", ok, f"{rep.true_relative_residual:.3e} <= 10*rtol"))

    if rep.method == "pipelcg":
        l = rep.pipeline_length
        steady = [c for c in rep.per_iteration_counters if c["iteration"] >= 2 * l]
        ok = all(c["spmv"] == 1 and c["local_dots"] == l + 1 and c["reductions_initiated"] == 1
                 for c in steady[:-1])
        out.append(("steady-state counters", ok, f"1 spmv, 1 reduction, {l + 1} dots per iteration"))

    if rep.method != "cg":
        ref_cfg = replace(config, method="cg", label="cg", fabric=FabricConfig())
        ref = execute(ref_cfg).report
        stop = None
        if rep.breakdowns:
            stop = rep.breakdowns[0]["iteration"] - (rep.pipeline_length if rep.method == "pipelcg" else 0)
        d = checks.history_deviation(ref.relative_residual_history, rep.relative_residual_history, stop,
                                    floor=config.rtol)
        worst = float(d.max()) if d.size else 0.0
        out.append(("residual history vs classic CG", worst <= VALIDATION_RTOL,
                    f"max relative deviation {worst:.2e} (limit {VALIDATION_RTOL:g})"))

    if rep.method == "pipelcg":
        A, b = build_problem(config.problem)
        M = None if config.pc == "none" else "jacobi"
        rec = {}
        small = min(30, max(A.n - rep.pipeline_length - 2, 1))
        pipelcg_solve(A, M, b, l=rep.pipeline_length, sigma=rep.shifts, rtol=1e-300, maxit=small,
                      record=rec, restart_budget=0)
        l = rep.pipeline_length
        V, Z = checks.explicit_bases(rec, l)
        Gx = checks.explicit_g(V, Z, M, A)
        state = checks.first_cycle(rec)["state"]
        sym = checks.g_band_symmetry_error(Gx, l)
        agree = checks.g_agreement_error(state, Gx, l)
        out.append(("G band symmetry", sym <= 1e-10 and agree <= 1e-10,
                    f"symmetry {sym:.1e}, recurrence vs explicit {agree:.1e} (limit 1e-10)"))
    return out


# -- compare ----------------------------------------------------------------

def compare(configs: list[RunConfig]) -> list[dict]:
    """Run every config on the same problem; one row each, speedups against the first."""
    if len(configs) < 2:
        raise ContractViolation("compare needs at least two configurations")
    labels = {c.problem.label() + f"/{c.problem.rhs}/{c.problem.seed}" for c in configs}
    if len(labels) > 1:
        raise ContractViolation(f"configurations use different problems: {sorted(labels)}")
    rows = []
    for cfg in configs:
        res = execute(cfg)
        rep = res.report
        row = {"label": cfg.label, "method": rep.method, "l": rep.pipeline_length,
               "converged": rep.converged, "iterations": rep.iterations, "restarts": rep.restarts,
               "reductions_initiated": rep.counters["reductions_initiated"],
               "total_time": rep.total_time, "time_per_iteration": res.time_per_iteration,
               "time_unit": rep.time_unit}
        for k in (*KERNELS, "GLRED_wait"):
            row[k] = rep.kernel_times.get(k, 0.0)
        rows.append(row)
    base = rows[0]
    for row in rows:
        row["speedup"] = _ratio(base["time_per_iteration"], row["time_per_iteration"])
        row["total_speedup"] = _ratio(base["total_time"], row["total_time"])
    return rows


def _ratio(a, b):
    return a / b if b else (1.0 if a == 0 else float("inf"))


def rows_csv(rows, fields=COMPARE_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def format_table(rows) -> str:
    cols = ("label", "iterations", "converged", "restarts", "time_per_iteration", "total_time",
            "speedup", "total_speedup")
    lines = ["  ".join(f"{c:>18}" for c in cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            cells.append(f"{v:>18.6g}" if isinstance(v, float) else f"{str(v):>18}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


# -- argument parsing -------------------------------------------------------

def _add_problem_options(p):
    g = p.add_argument_group("problem")
    g.add_argument("--problem", help="laplacian2d:NXxNY, diagonal:NXxNY or mm:PATH "
                                     "(default laplacian2d:100x100)")
    g.add_argument("--rhs", choices=("ones", "random"), help="right-hand side (default ones)")
    g.add_argument("--seed", type=int, help="seed for the random rhs and latency jitter")


def _add_solver_options(p, with_method=True):
    g = p.add_argument_group("solver")
    if with_method:
        g.add_argument("--method", choices=METHODS, help="default pipelcg")
    g.add_argument("--pipel", "-ksp_pipelcg_pipel", dest="pipel", type=int, help="pipeline length l")
    g.add_argument("--lmin", "-ksp_pipelcg_lmin", dest="lmin", type=float, help="lower end of the shift interval")
    g.add_argument("--lmax", "-ksp_pipelcg_lmax", dest="lmax", type=float,
                   help="upper end of the shift interval (default: power-method estimate)")
    g.add_argument("--shifts", help="explicit comma-separated shifts instead of Chebyshev")
    g.add_argument("--rtol", "-ksp_rtol", dest="rtol", type=float, help="relative tolerance (default 1e-6)")
    g.add_argument("--maxit", "-ksp_max_it", dest="maxit", type=int, help="iteration cap")
    g.add_argument("--pc", "-pc_type", dest="pc", choices=("jacobi", "none"), help="default jacobi")


def _add_fabric_options(p):
    g = p.add_argument_group("reduction fabric")
    g.add_argument("--backend", choices=BACKENDS)
    g.add_argument("--ranks", type=int)
    g.add_argument("--latency", type=float, help="seconds (threaded) or ticks (simulated)")
    g.add_argument("--jitter", type=float, help="relative latency jitter in [0, 1)")
    g.add_argument("--max-inflight", dest="max_inflight", type=int)
    g.add_argument("--progress", choices=("worker", "poll"))
    for kind in ("spmv", "prec", "axpy", "dot_local", "scalar"):
        g.add_argument(f"--cost-{kind.replace('_', '-')}", dest=f"cost_{kind}", type=float,
                       help=f"simulated ticks per {kind} invocation")


def _add_output_options(p):
    g = p.add_argument_group("output")
    g.add_argument("--config", action="append", default=[], metavar="RUNCONFIG",
                   help="key = value file; command-line flags take precedence")
    g.add_argument("--output-dir", type=Path, help="directory for report files")
    g.add_argument("--format", dest="output", help="json, csv or both (default both)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipelcg-bench", description=__doc__.split("\n")[0],
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve one configuration", allow_abbrev=False)
    _add_problem_options(run)
    _add_solver_options(run)
    _add_fabric_options(run)
    _add_output_options(run)
    run.add_argument("--validate", action="store_true", help="check solver invariants after the run")

    cmp_ = sub.add_parser("compare", help="solve with several methods on one problem",
                          allow_abbrev=False)
    _add_problem_options(cmp_)
    _add_solver_options(cmp_, with_method=False)
    _add_fabric_options(cmp_)
    _add_output_options(cmp_)
    cmp_.add_argument("--runs", nargs="+", metavar="METHOD[:L]",
                      help="e.g. cg pcg pipelcg:1 pipelcg:2; the first row is the baseline")

    sim = sub.add_parser("simulate", help="performance model of the kernel schedule",
                         allow_abbrev=False)
    sim.add_argument("--method", choices=METHODS, default="pipelcg")
    sim.add_argument("--pipel", "-ksp_pipelcg_pipel", dest="pipel", type=int, default=1)
    sim.add_argument("--glred", type=float, default=1.0, help="reduction latency")
    sim.add_argument("--spmv", type=float, default=1.0, help="SPMV (+ preconditioner) time")
    sim.add_argument("--axpy", type=float, default=0.0)
    sim.add_argument("--dot-local", dest="dot_local", type=float, default=0.0)
    sim.add_argument("--scalar", type=float, default=0.0)
    sim.add_argument("--iterations", type=int, default=50)
    sim.add_argument("--output-dir", type=Path)
    sim.add_argument("--format", dest="output", default="json", help="json, csv or both")
    return parser


def _mapping_from_args(args) -> dict:
    m = {}
    for path in args.config:
        m.update(parse_keyvalue_text(Path(path).read_text()))
    for key in ("problem", "rhs", "seed", "method", "pipel", "lmin", "lmax", "shifts", "rtol",
                "maxit", "pc", "output", *_FABRIC_KEYS,
                "cost_spmv", "cost_prec", "cost_axpy", "cost_dot_local", "cost_scalar"):
        v = getattr(args, key, None)
        if v is not None:
            m[key] = v
    return m


def _cmd_run(args, out) -> int:
    config = RunConfig.from_mapping(_mapping_from_args(args))
    result = execute(config)
    rep = result.report
    print(f"{config.label} on {config.problem.label()}: "
          f"{'converged' if rep.converged else 'NOT converged (' + rep.reason + ')'} "
          f"after {rep.iterations} iterations, {rep.restarts} restarts; "
          f"true relative residual {rep.true_relative_residual:.3e}; "
          f"{result.time_per_iteration:.6g} {rep.time_unit}/iteration", file=out)
    if args.output_dir is not None:
        for p in write_outputs(result, args.output_dir):
            print(f"wrote {p}", file=out)
    status = EXIT_OK if rep.converged else EXIT_NOT_CONVERGED
    if args.validate:
        results = validation_suite(config, result)
        for name, ok, detail in results:
            print(f"validate {name}: {'PASS' if ok else 'FAIL'} ({detail})", file=out)
        if status == EXIT_OK and not all(ok for _, ok, _ in results):
            status = EXIT_VALIDATION
    return status


def _cmd_compare(args, out) -> int:
    base = _mapping_from_args(args)
    base.pop("method", None)
    runs = args.runs or ["cg", "pcg", "pipelcg:1", "pipelcg:2", "pipelcg:3"]
    configs = []
    for spec in runs:
        method, _, l = spec.partition(":")
        m = dict(base, method=method)
        if l:
            m["pipel"] = l
        configs.append(RunConfig.from_mapping(m))
    rows = compare(configs)
    print(format_table(rows), file=out)
    if args.output_dir is not None:
        args.output_dir.mkdir(parents=True, exist_ok=True)
        fmts = configs[0].output
        if "csv" in fmts:
            (args.output_dir / "compare.csv").write_text(rows_csv(rows))
        if "json" in fmts:
            (args.output_dir / "compare.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NOT_CONVERGED


def _cmd_simulate(args, out) -> int:
    costs = KernelCosts(t_spmv=args.spmv, t_glred=args.glred, t_axpy=args.axpy,
                        t_dot_local=args.dot_local, t_scalar=args.scalar)
    trace = simulate(args.method, args.pipel, costs, args.iterations)
    print(f"{args.method} l={trace.l}: {trace.steady_state_time_per_iteration:.6g} per iteration "
          f"(steady state), total {trace.total_time:.6g}, "
          f"max {trace.max_in_flight()} reductions in flight", file=out)
    if args.output_dir is not None:
        args.output_dir.mkdir(parents=True, exist_ok=True)
        fmts = parse_output(args.output)
        if "json" in fmts:
            (args.output_dir / "trace.json").write_text(trace.to_json() + "\n")
        if "csv" in fmts:
            (args.output_dir / "trace.csv").write_text(trace.to_csv())
    return EXIT_OK


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    handler = {"run": _cmd_run, "compare": _cmd_compare, "simulate": _cmd_simulate}[args.command]
    try:
        return handler(args, out)
    except (ContractViolation, MatrixMarketError, OSError, ValueError) as exc:
        print(f"pipelcg-bench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BreakdownError as exc:
        print(f"pipelcg-bench: breakdown: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
