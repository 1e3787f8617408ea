"""Non-blocking reduction fabric: initiate an allreduce, wait for it later.

Three interchangeable backends model the ``MPI_Iallreduce``/``MPI_Wait``
pair:

``immediate``
    the reduction is complete when ``iallreduce`` returns.
``threaded_latency``
    results are published after a wall-clock latency, either by a
    dedicated progress worker thread (default) or on polling.
``simulated_clock``
    a deterministic, single-threaded clock.  Local work is charged through
    :meth:`Fabric.compute` and reductions complete ``latency`` ticks after
    they were initiated.  Many reductions may be in flight at once, which
    is what lets a deep pipeline stagger them.

Ranks are in-process; a "global reduction" is the rank-ordered tree sum of
the per-rank partials (:func:`pipelcg.linalg.tree_sum`), so every backend
returns bit-identical results for identical partials.
"""
from __future__ import annotations

import heapq
import itertools
import json
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FabricSaturationError
from .linalg import tree_sum

__all__ = [
    "FabricConfig",
    "ReductionHandle",
    "TraceEvent",
    "Fabric",
    "ImmediateFabric",
    "ThreadedLatencyFabric",
    "SimulatedClockFabric",
    "make_fabric",
    "parse_keyvalue_text",
    "max_concurrent_reductions",
]

BACKENDS = ("immediate", "threaded_latency", "simulated_clock")
COST_KINDS = ("spmv", "prec", "axpy", "dot_local", "scalar")


@dataclass
class FabricConfig:
    """How reductions are carried out.

    ``latency`` is in seconds for ``threaded_latency`` and in ticks for
    ``simulated_clock``.  ``jitter`` is a relative half-width: each latency
    is drawn uniformly from ``latency * [1 - jitter, 1 + jitter]``.
    ``compute_costs`` maps a work kind (``spmv``, ``prec``, ``axpy``,
    ``dot_local``, ``scalar``) to the ticks charged per invocation on the
    simulated clock.
    """

    backend: str = "immediate"
    ranks: int = 1
    latency: float = 0.0
    max_inflight: int = 8
    jitter: float = 0.0
    seed: int = 0
    progress: str = "worker"
    compute_costs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ContractViolation(f"unknown fabric backend {self.backend!r}; choose from {BACKENDS}")
        if self.ranks < 1:
            raise ContractViolation("ranks must be >= 1")
        if self.latency < 0 or not np.isfinite(self.latency):
            raise ContractViolation("latency must be finite and >= 0")
        if self.max_inflight < 1:
            raise ContractViolation("max_inflight must be >= 1")
        if not 0 <= self.jitter < 1:
            raise ContractViolation("jitter must lie in [0, 1)")
        if self.progress not in ("worker", "poll"):
            raise ContractViolation("progress must be 'worker' or 'poll'")
        for k, v in self.compute_costs.items():
            if k not in COST_KINDS:
                raise ContractViolation(f"unknown cost kind {k!r}; choose from {COST_KINDS}")
            if v < 0 or not np.isfinite(v):
                raise ContractViolation(f"cost {k} must be finite and >= 0")

    @classmethod
    def from_mapping(cls, mapping) -> "FabricConfig":
        """Build from string-valued ``key -> value`` pairs (config files, CLI).

        Keys ``cost_<kind>`` fill ``compute_costs``; unknown keys are an error.
        """
        kwargs, costs = {}, {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in mapping.items():
            key = key.strip().replace("-", "_")
            if key.startswith("cost_"):
                costs[key[5:]] = float(raw)
            elif key in types and key != "compute_costs":
                kwargs[key] = _coerce(raw, types[key])
            else:
                raise ContractViolation(f"unknown fabric option {key!r}")
        return cls(compute_costs=costs, **kwargs)

    @classmethod
    def from_file(cls, path) -> "FabricConfig":
        return cls.from_mapping(parse_keyvalue_text(Path(path).read_text()))

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in asdict(self).items() if k != "compute_costs"]
        lines += [f"cost_{k} = {v}" for k, v in sorted(self.compute_costs.items())]
        return "\n".join(lines) + "\n"


def _coerce(raw, typ):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def parse_keyvalue_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class TraceEvent:
    """One interval on the fabric's timeline.

    ``kind`` is ``compute``, ``glred`` (initiation to completion), ``wait``
    (call to return) or ``mark`` (an instant, start == end).
    """

    kind: str
    label: str
    start: float
    end: float
    iteration: int | None = None

    def as_dict(self):
        return asdict(self)


class ReductionHandle:
    """Token for one in-flight reduction, tagged with the initiating iteration."""

    _ids = itertools.count()

    def __init__(self, fabric, iteration_tag: int, payload_len: int, result: np.ndarray):
        self.iteration_tag = iteration_tag
        self.payload_len = payload_len
        self.initiated_at = fabric.now()
        self.completes_at: float | None = None
        self.consumed = False
        self._fabric_id = fabric._id
        self._result = result
        self._done = threading.Event()
        self._handle_id = next(self._ids)

    @property
    def status(self) -> str:
        if self.consumed:
            return "consumed"
        return "completed" if self._done.is_set() else "in-flight"

    def __repr__(self):
        return f"ReductionHandle(tag={self.iteration_tag}, len={self.payload_len}, {self.status})"


class Fabric:
    """Common bookkeeping; subclasses decide when a handle completes."""

    simulated = False
    time_unit = "s"
    _ids = itertools.count()

    def __init__(self, config: FabricConfig | None = None):
        self.config = config or FabricConfig(backend=self.backend_name)
        self.ranks = self.config.ranks
        self.max_inflight = self.config.max_inflight
        self._id = next(self._ids)
        self._lock = threading.Lock()
        self._outstanding: dict[int, ReductionHandle] = {}
        self._rng = np.random.default_rng(self.config.seed)
        self._t0 = time.monotonic()
        self.trace: list[TraceEvent] = []
        self.record_trace = True

    # -- clock ------------------------------------------------------------
    def now(self) -> float:
        return time.monotonic() - self._t0

    def compute(self, kind: str, count: int = 1, label: str | None = None,
                iteration: int | None = None) -> float:
        """Charge ``count`` invocations of local work.  Real backends do nothing."""
        return 0.0

    def mark(self, label: str, iteration: int | None = None) -> None:
        if self.record_trace:
            t = self.now()
            self.trace.append(TraceEvent("mark", label, t, t, iteration))

    def _draw_latency(self) -> float:
        lat = self.config.latency
        if self.config.jitter and lat:
            lat *= 1.0 + self._rng.uniform(-self.config.jitter, self.config.jitter)
        return lat

    # -- reductions -------------------------------------------------------
    @property
    def in_flight(self) -> int:
        return len(self._outstanding)

    def iallreduce(self, partials, tag: int) -> ReductionHandle:
        """Start summing per-rank ``partials`` (shape ``(P, m)``); return at once."""
        rows = [np.asarray(p, dtype=np.float64).reshape(-1) for p in partials]
        if len(rows) != self.ranks:
            raise ContractViolation(f"expected partials from {self.ranks} ranks, got {len(rows)}")
        m = rows[0].size
        if any(r.size != m for r in rows):
            raise ContractViolation("per-rank payloads have different lengths")
        with self._lock:
            if len(self._outstanding) >= self.max_inflight:
                raise FabricSaturationError(
                    f"{len(self._outstanding)} reductions already in flight (max {self.max_inflight})")
            handle = ReductionHandle(self, tag, m, tree_sum(rows))
            self._outstanding[handle._handle_id] = handle
        self._launch(handle)
        return handle

    def _check(self, handle: ReductionHandle):
        if not isinstance(handle, ReductionHandle) or handle._fabric_id != self._id:
            raise ContractViolation("handle belongs to a different fabric")
        if handle.consumed:
            raise ContractViolation(f"reduction {handle.iteration_tag} was already waited on")

    def test(self, handle: ReductionHandle) -> bool:
        self._check(handle)
        return self._poll(handle)

    def wait(self, handle: ReductionHandle) -> np.ndarray:
        self._check(handle)
        called = self.now()
        self._block(handle)
        with self._lock:
            if handle.consumed:
                raise ContractViolation(f"reduction {handle.iteration_tag} was already waited on")
            handle.consumed = True
            self._outstanding.pop(handle._handle_id, None)
        if self.record_trace:
            done = handle.completes_at if handle.completes_at is not None else self.now()
            self.trace.append(TraceEvent("glred", "GLRED", handle.initiated_at, done,
                                         handle.iteration_tag))
            self.trace.append(TraceEvent("wait", "WAIT", called, self.now(), handle.iteration_tag))
        return handle._result.copy()

    def drain(self) -> list[np.ndarray]:
        """Wait every outstanding handle in initiation order."""
        with self._lock:
            pending = sorted(self._outstanding.values(), key=lambda h: h._handle_id)
        return [self.wait(h) for h in pending]

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- backend hooks ----------------------------------------------------
    def _launch(self, handle):
        raise NotImplementedError

    def _poll(self, handle) -> bool:
        raise NotImplementedError

    def _block(self, handle):
        raise NotImplementedError


class ImmediateFabric(Fabric):
    backend_name = "immediate"

    def _launch(self, handle):
        handle.completes_at = handle.initiated_at
        handle._done.set()

    def _poll(self, handle):
        return True

    def _block(self, handle):
        pass


class ThreadedLatencyFabric(Fabric):
    """Publishes each result ``latency`` seconds after initiation.

    With ``progress='worker'`` a daemon thread services a timed completion
    queue; with ``progress='poll'`` completion is only noticed by ``test``
    or ``wait``.
    """

    backend_name = "threaded_latency"

    def __init__(self, config=None):
        super().__init__(config)
        self._queue: list = []
        self._cv = threading.Condition()
        self._stop = False
        self._seq = itertools.count()
        self._worker = None
        if self.config.progress == "worker":
            self._worker = threading.Thread(target=self._progress, name="fabric-progress", daemon=True)
            self._worker.start()

    def _launch(self, handle):
        due = time.monotonic() + self._draw_latency()
        handle._due = due
        handle.completes_at = due - self._t0
        if self._worker is None:
            return
        with self._cv:
            heapq.heappush(self._queue, (due, next(self._seq), handle))
            self._cv.notify()

    def _progress(self):
        with self._cv:
            while not self._stop:
                if not self._queue:
                    self._cv.wait()
                    continue
                due, _, handle = self._queue[0]
                delay = due - time.monotonic()
                if delay > 0:
                    self._cv.wait(timeout=delay)
                    continue
                heapq.heappop(self._queue)
                handle._done.set()

    def _poll(self, handle):
        if not handle._done.is_set() and time.monotonic() >= handle._due:
            handle._done.set()
        return handle._done.is_set()

    def _block(self, handle):
        if self._worker is not None:
            handle._done.wait()
            return
        delay = handle._due - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        while time.monotonic() < handle._due:
            time.sleep(1e-4)
        handle._done.set()

    def close(self):
        if self._worker is not None:
            with self._cv:
                self._stop = True
                self._cv.notify()
            self._worker.join(timeout=1.0)
            self._worker = None


class SimulatedClockFabric(Fabric):
    """Deterministic discrete-event clock measured in ticks."""

    backend_name = "simulated_clock"
    simulated = True
    time_unit = "ticks"

    def __init__(self, config=None):
        super().__init__(config)
        self._clock = 0.0

    def now(self) -> float:
        return self._clock

    def advance(self, ticks: float) -> None:
        if ticks < 0:
            raise ContractViolation("cannot move the simulated clock backwards")
        self._clock += ticks

    def compute(self, kind, count=1, label=None, iteration=None):
        cost = self.config.compute_costs.get(kind, 0.0) * count
        if cost:
            start = self._clock
            self._clock += cost
            if self.record_trace:
                self.trace.append(TraceEvent("compute", label or kind, start, self._clock, iteration))
        return cost

    def _launch(self, handle):
        handle.completes_at = handle.initiated_at + self._draw_latency()

    def _poll(self, handle):
        if self._clock >= handle.completes_at:
            handle._done.set()
        return handle._done.is_set()

    def _block(self, handle):
        if self._clock < handle.completes_at:
            self._clock = handle.completes_at
        handle._done.set()


_BACKEND_CLASSES = {
    "immediate": ImmediateFabric,
    "threaded_latency": ThreadedLatencyFabric,
    "simulated_clock": SimulatedClockFabric,
}


def make_fabric(config: FabricConfig | None = None, **kwargs) -> Fabric:
    """Instantiate the backend named by ``config.backend`` (or by keyword arguments)."""
    if config is None:
        config = FabricConfig(**kwargs)
    elif kwargs:
        raise TypeError("pass either a FabricConfig or keyword arguments, not both")
    return _BACKEND_CLASSES[config.backend](config)


def max_concurrent_reductions(trace) -> int:
    """Largest number of reductions whose [initiated, completed) intervals overlap."""
    points = []
    for ev in trace:
        if ev.kind == "glred" and ev.end > ev.start:
            points.append((ev.start, 1))
            points.append((ev.end, -1))
    # completions sort before initiations at the same instant: intervals are half-open
    points.sort(key=lambda p: (p[0], p[1]))
    best = cur = 0
    for _, step in points:
        cur += step
        best = max(best, cur)
    return best


def trace_to_json(trace) -> str:
    return json.dumps([ev.as_dict() for ev in trace], indent=1)
