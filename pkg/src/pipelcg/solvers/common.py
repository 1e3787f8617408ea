"""Shared solver plumbing: preconditioners, reports, counters, shifts."""
from __future__ import annotations

import json
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from ..comm import Fabric, ImmediateFabric
from ..errors import ContractViolation
from ..linalg import RankedVector, SparseMatrix, block_partition, tree_sum

KERNELS = ("K1", "K2", "K3", "K4", "K5", "K6")
COUNTERS = ("spmv", "preconditioner_applies", "reductions_initiated", "local_dots", "axpys")

# counter name -> cost kind charged on a simulated clock
_COST_KIND = {
    "spmv": "spmv",
    "preconditioner_applies": "prec",
    "local_dots": "dot_local",
    "axpys": "axpy",
    "scalar": "scalar",
}


@dataclass
class Preconditioner:
    """Point preconditioner ``M``; only identity and Jacobi (``M = diag(A)``)."""

    kind: str = "identity"
    inverse_diagonal: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "jacobi"):
            raise ContractViolation(f"unsupported preconditioner {self.kind!r}")
        if self.kind == "jacobi":
            inv = np.asarray(self.inverse_diagonal, dtype=np.float64)
            if not np.all(np.isfinite(inv)) or np.any(inv <= 0):
                raise ContractViolation("Jacobi needs a finite, positive diagonal")
            self.inverse_diagonal = inv

    @classmethod
    def identity(cls) -> "Preconditioner":
        return cls("identity")

    @classmethod
    def jacobi(cls, A: SparseMatrix) -> "Preconditioner":
        d = A.diagonal()
        if np.any(d <= 0):
            raise ContractViolation("Jacobi needs a positive diagonal (is A SPD?)")
        return cls("jacobi", 1.0 / d)

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def apply(self, u: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """``M^{-1} u``."""
        if self.is_identity:
            if out is None:
                return u.copy()
            if out is not u:
                out[...] = u
            return out
        if out is None:
            return self.inverse_diagonal * u
        np.multiply(self.inverse_diagonal, u, out=out)
        return out

    def apply_forward(self, z: np.ndarray) -> np.ndarray:
        """``M z`` (used for Rayleigh quotients and M-norm checks)."""
        if self.is_identity:
            return z.copy()
        return z / self.inverse_diagonal


def as_preconditioner(M, A: SparseMatrix) -> Preconditioner:
    if M is None:
        return Preconditioner.identity()
    if isinstance(M, Preconditioner):
        return M
    if isinstance(M, str):
        key = M.lower()
        if key in ("none", "identity"):
            return Preconditioner.identity()
        if key == "jacobi":
            return Preconditioner.jacobi(A)
    raise ContractViolation(f"cannot interpret preconditioner {M!r}")


def as_matrix(A) -> SparseMatrix:
    if isinstance(A, SparseMatrix):
        return A
    if isinstance(A, np.ndarray):
        return SparseMatrix.from_dense(A)
    return SparseMatrix.from_scipy(A)


def as_array(v, n: int, name: str) -> np.ndarray:
    data = v.data if isinstance(v, RankedVector) else v
    arr = np.array(data, dtype=np.float64).reshape(-1)
    if arr.size != n:
        raise ContractViolation(f"{name} has length {arr.size}, expected {n}")
    return arr


@dataclass
class SolveReport:
    """What a solve did.

    ``iterations`` counts main-loop iterations (one SPMV each), pipeline
    fill included.  ``counters`` cover the main loop only; the initial
    residual and the final true-residual check are in ``setup_counters``.
    ``recursive_residual_history`` holds the residual norm estimates
    (natural ``M^{-1}`` norm when preconditioned) of successive iterates.
    """

    method: str
    converged: bool = False
    iterations: int = 0
    restarts: int = 0
    reason: str = ""
    pipeline_length: int = 0
    rtol: float = 0.0
    shifts: list = field(default_factory=list)
    initial_residual: float = 0.0
    recursive_residual_history: list = field(default_factory=list)
    true_final_residual: float = float("nan")
    true_relative_residual: float = float("nan")
    counters: dict = field(default_factory=dict)
    setup_counters: dict = field(default_factory=dict)
    per_iteration_counters: list = field(default_factory=list)
    kernel_times: dict = field(default_factory=dict)
    time_unit: str = "s"
    total_time: float = 0.0
    work_vectors_high_water: int = 0
    aux_vectors_high_water: int = 0
    max_reductions_in_flight: int = 0
    breakdowns: list = field(default_factory=list)

    @property
    def relative_residual_history(self) -> np.ndarray:
        h = np.asarray(self.recursive_residual_history, dtype=np.float64)
        return h / self.initial_residual if self.initial_residual else h

    def to_dict(self, include_per_iteration: bool = False) -> dict:
        d = asdict(self)
        if not include_per_iteration:
            d.pop("per_iteration_counters")
        return d

    def to_json(self, include_per_iteration: bool = False) -> str:
        return json.dumps(self.to_dict(include_per_iteration), indent=2, sort_keys=True,
                          default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


class Instrument:
    """Counts kernel work, charges it to the fabric clock and times kernels.

    Under a simulated clock, kernel times are the ticks charged; otherwise
    they are monotonic wall-clock seconds.  ``events`` logs the order of
    kernels, waits and initiations as ``(iteration, name, tag)`` tuples.
    """

    def __init__(self, fabric: Fabric, record_events: bool = True):
        self.fabric = fabric
        self.counters = dict.fromkeys(COUNTERS, 0)
        self.setup_counters = dict.fromkeys(COUNTERS, 0)
        self.kernel_times = dict.fromkeys(KERNELS + ("GLRED_wait",), 0.0)
        self.per_iteration: list[dict] = []
        self.events: list[tuple] = [] if record_events else None
        self.phase = "setup"
        self.iteration: int | None = None
        self.kernel: str | None = None
        self._snapshot = None
        self.max_in_flight = 0

    @property
    def time_unit(self) -> str:
        return self.fabric.time_unit

    def _bucket(self):
        return self.counters if self.phase == "loop" else self.setup_counters

    def begin_iteration(self, i: int):
        self.phase = "loop"
        self.iteration = i
        self._snapshot = dict(self.counters)
        self.fabric.mark("ITER", i)
        if self.events is not None:
            self.events.append((i, "ITER", None))

    def end_iteration(self):
        delta = {k: self.counters[k] - self._snapshot[k] for k in COUNTERS}
        delta["iteration"] = self.iteration
        self.per_iteration.append(delta)
        self.phase = "setup"
        self.iteration = None

    def count(self, what: str, n: int = 1):
        """Record ``n`` units of work and charge them to the fabric clock."""
        if what in COUNTERS:
            self._bucket()[what] += n
        ticks = self.fabric.compute(_COST_KIND[what], n, self.kernel or what, self.iteration)
        if self.fabric.simulated and self.kernel:
            self.kernel_times[self.kernel] += ticks

    @contextmanager
    def kernel_scope(self, name: str):
        prev, self.kernel = self.kernel, name
        if self.events is not None:
            self.events.append((self.iteration, name, None))
        t0 = time.perf_counter()
        try:
            yield
        finally:
            if not self.fabric.simulated:
                self.kernel_times[name] += time.perf_counter() - t0
            self.kernel = prev

    def iallreduce(self, partials, tag: int):
        self._bucket()["reductions_initiated"] += 1
        h = self.fabric.iallreduce(partials, tag)
        self.max_in_flight = max(self.max_in_flight, self.fabric.in_flight)
        if self.events is not None:
            self.events.append((self.iteration, "IALLREDUCE", tag))
        return h

    def wait(self, handle) -> np.ndarray:
        t0 = self.fabric.now()
        out = self.fabric.wait(handle)
        self.kernel_times["GLRED_wait"] += self.fabric.now() - t0
        if self.events is not None:
            self.events.append((self.iteration, "WAIT", handle.iteration_tag))
        return out

    def allreduce(self, partials, tag: int) -> np.ndarray:
        """Blocking reduction: initiate and immediately wait."""
        return self.wait(self.iallreduce(partials, tag))

    def drain(self):
        if self.fabric.in_flight:
            self.fabric.drain()


def default_fabric(fabric: Fabric | None) -> Fabric:
    return fabric if fabric is not None else ImmediateFabric()


def partition_for(n: int, fabric: Fabric) -> np.ndarray:
    return block_partition(n, fabric.ranks)


def global_dot(partition, x, y) -> float:
    """Reproducible sequential reference: the same rank-ordered tree, no fabric."""
    parts = [[np.dot(x[lo:hi], y[lo:hi])] for lo, hi in zip(partition[:-1], partition[1:])]
    return float(tree_sum(parts)[0])


def m_norm_residual(A: SparseMatrix, M: Preconditioner, b, x) -> tuple[float, float]:
    """``(||b - Ax||_2, sqrt((r, M^{-1} r)))``."""
    r = b - A.matvec(x)
    return float(np.linalg.norm(r)), float(math.sqrt(max(np.dot(r, M.apply(r)), 0.0)))


def chebyshev_shifts(lambda_min: float, lambda_max: float, l: int) -> np.ndarray:
    """Roots of the degree-``l`` Chebyshev polynomial mapped onto ``[lambda_min, lambda_max]``."""
    if l < 1:
        raise ContractViolation(f"pipeline length must be >= 1, got {l}")
    if not lambda_max > lambda_min:
        raise ContractViolation(f"need lambda_max > lambda_min, got [{lambda_min}, {lambda_max}]")
    i = np.arange(l)
    mid = 0.5 * (lambda_max + lambda_min)
    half = 0.5 * (lambda_max - lambda_min)
    return mid + half * np.cos((2 * i + 1) * np.pi / (2 * l))


def estimate_spectrum(A, M=None, iters: int = 10, seed: int = 0) -> tuple[float, float]:
    """Power iteration on ``M^{-1}A``; returns ``(0.0, rayleigh_quotient)``.

    The lower bound is always reported as 0, following common practice of
    placing the shift interval at ``[0, lambda_max]``.
    """
    A = as_matrix(A)
    M = as_preconditioner(M, A)
    if iters < 1:
        raise ContractViolation("need at least one power iteration")
    for attempt in range(8):
        x = np.random.default_rng(seed + attempt).standard_normal(A.n)
        if np.any(x):
            break
    else:  # pragma: no cover - a standard normal draw is never all zeros
        raise ContractViolation("could not draw a nonzero start vector")
    rq = 0.0
    for _ in range(iters):
        x /= np.linalg.norm(x)
        Ax = A.matvec(x)
        denom = np.dot(x, M.apply_forward(x))
        rq = float(np.dot(x, Ax) / denom)
        x = M.apply(Ax)
        if not np.any(x):
            break
    return 0.0, rq
