"""Virtual-time discrete-event harness around the real scheduler and DAG driver.

Simulated executors complete tasks after model-given service times (affine
in sequence length, per task kind); the scheduler state machine and the
job driver run unmodified. Optionally each simulated completion actually
computes the task's payload, which lets the harness check that grid
execution is byte-identical to an in-process sequential run.

The three shipped experiments mirror the structure of the phase-dominance,
parallel-speedup and 64-job scalability studies at desk scale: absolute
2008-era wall-clock numbers are out of reach, so closed-form and shape
checks stand in for them.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

from .client import JobDriver, NullPackageBuilder, PackageBuilder
from .core import ProteinSequence, TaskKind
from .protocol import NodeDescriptor, TaskPackage
from .scheduler import COMPLETED, SchedulerState

FIG10_LENGTHS = (50, 100, 174, 417)

# Classification-fraction targets at the shortest/longest calibration length:
# short sequences spend the largest share of time in the classifier phase.
_PHI_SHORT = 0.825
_PHI_LONG = 0.529


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class ServiceTimeModel:
    """Per-kind virtual service time: base + slope * sequence_length."""

    base: dict[TaskKind, float]
    slope: dict[TaskKind, float]

    def __post_init__(self) -> None:
        for kind in TaskKind:
            if kind not in self.base or kind not in self.slope:
                raise ConfigInvalid(f"model missing duration for kind {kind.letter}")

    def duration(self, kind: TaskKind, length: int) -> float:
        d = self.base[kind] + self.slope[kind] * length
        if d < 0:
            raise ConfigInvalid(f"negative duration for {kind.letter} at L={length}")
        return d

    def phase_times(self, length: int) -> tuple[float, float, float]:
        """Sequential (init, classify, final) durations for one job."""
        init = (self.duration(TaskKind.PROFILE, length)
                + self.duration(TaskKind.CREATE_VECTOR, length))
        classify = sum(self.duration(k, length) for k in TaskKind if k.is_classifier)
        final = self.duration(TaskKind.FINAL_PREDICT, length)
        return init, classify, final

    def serial_time(self, length: int) -> float:
        return sum(self.phase_times(length))

    def classification_fraction(self, length: int) -> float:
        init, classify, final = self.phase_times(length)
        return classify / (init + classify + final)

    def dump(self) -> str:
        lines = []
        for kind in TaskKind:
            lines.append(f"{kind.letter} {self.base[kind]!r} {self.slope[kind]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "ServiceTimeModel":
        base: dict[TaskKind, float] = {}
        slope: dict[TaskKind, float] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 3:
                raise ConfigInvalid(f"line {lineno}: expected '<kind> <base_s> <slope_s_per_residue>'")
            try:
                kind = TaskKind.from_letter(tokens[0])
            except ValueError:
                raise ConfigInvalid(f"line {lineno}: unknown kind {tokens[0]!r}") from None
            base[kind] = float(tokens[1])
            slope[kind] = float(tokens[2])
        return cls(base=base, slope=slope)

    @classmethod
    def parse_file(cls, path: str) -> "ServiceTimeModel":
        with open(path) as fh:
            return cls.parse(fh.read())


def default_model(classifier_s: float = 10.0) -> ServiceTimeModel:
    """Calibrated default: each classifier takes a fixed `classifier_s`, and
    the non-classifier time grows with length so the classification fraction
    runs from ~0.825 at L=50 down to ~0.529 at L=417."""
    c6 = 6.0 * classifier_s
    lo, hi = FIG10_LENGTHS[0], FIG10_LENGTHS[-1]
    rest_lo = c6 * (1.0 - _PHI_SHORT) / _PHI_SHORT
    rest_hi = c6 * (1.0 - _PHI_LONG) / _PHI_LONG
    r_slope = (rest_hi - rest_lo) / (hi - lo)
    r_base = rest_lo - lo * r_slope
    base: dict[TaskKind, float] = {}
    slope: dict[TaskKind, float] = {}
    # split the remainder: profile 50%, vector 25%, final 25% (exact in binary)
    split = {TaskKind.PROFILE: 0.5, TaskKind.CREATE_VECTOR: 0.25,
             TaskKind.FINAL_PREDICT: 0.25}
    for kind in TaskKind:
        if kind.is_classifier:
            base[kind] = classifier_s
            slope[kind] = 0.0
        else:
            base[kind] = r_base * split[kind]
            slope[kind] = r_slope * split[kind]
    return ServiceTimeModel(base=base, slope=slope)


# ---------------------------------------------------------------------------
# The event-driven grid


@dataclass
class JobSpec:
    job_id: str
    length: int = 0
    seq: ProteinSequence | None = None
    builder: PackageBuilder = field(default_factory=NullPackageBuilder)
    arrival: float = 0.0

    def __post_init__(self) -> None:
        if self.seq is None:
            if self.length <= 0:
                raise ConfigInvalid("job needs a sequence or a positive length")
            self.seq = ProteinSequence(id=self.job_id, residues="A" * self.length)
        self.length = len(self.seq)


@dataclass
class JobStats:
    start: float
    end: float = 0.0
    failed: bool = False
    failure: str = ""
    init_time: float = 0.0
    classify_time: float = 0.0
    final_time: float = 0.0

    @property
    def makespan(self) -> float:
        return self.end - self.start


@dataclass
class SimResult:
    makespan: float
    jobs: dict[str, JobStats]
    utilization: float
    busy_time: float
    events: list[dict]
    results: dict[str, bytes]  # job_id -> final result blob (compute mode)
    retry_counts: dict[str, int]


class WorkConservationViolation(AssertionError):
    pass


class VirtualGrid:
    """Deterministic virtual-time grid: heap of (time, seq) events feeding the
    unmodified SchedulerState and JobDrivers."""

    def __init__(self, model: ServiceTimeModel,
                 executors: list[tuple[str, int]],
                 compute=None, latency: float = 0.0,
                 check_work_conservation: bool = True):
        self.model = model
        self.compute = compute
        self.latency = latency
        self.check_work_conservation = check_work_conservation and latency == 0.0
        self.events: list[dict] = []
        self.state = SchedulerState(event_sink=self.events.append)
        self._heap: list[tuple[float, int, str, tuple]] = []
        self._seq = 0
        self._gen: dict[str, int] = {}
        self._drivers: dict[str, JobDriver] = {}
        self._specs: dict[str, JobSpec] = {}
        self._stats: dict[str, JobStats] = {}
        self._task_start: dict[str, float] = {}
        self._classifier_window: dict[str, list[float]] = {}
        self._busy = 0.0
        self._node_busy_since: dict[str, dict[str, float]] = {}
        self._results: dict[str, bytes] = {}
        self._triggers: list = []
        self.now = 0.0
        for node_id, slots in executors:
            self._register(node_id, slots, now=0.0)

    # -- setup

    def _register(self, node_id: str, slots: int, now: float) -> None:
        self.state.register_node(
            NodeDescriptor(node_id=node_id, address=f"sim://{node_id}",
                           slot_count=slots, joined_at=now), now)
        self._gen.setdefault(node_id, 0)
        self._node_busy_since[node_id] = {}

    def add_job(self, spec: JobSpec) -> None:
        self._push(spec.arrival, "job", (spec,))

    def kill_at(self, t: float, node_id: str | None = None,
                when_running_classifier: bool = False) -> None:
        self._push(t, "kill", (node_id, when_running_classifier))

    def join_at(self, t: float, node_id: str, slots: int = 1) -> None:
        self._push(t, "join", (node_id, slots))

    def add_trigger(self, fn) -> None:
        """fn(grid) runs after every event; used by fault-injection tests."""
        self._triggers.append(fn)

    def _push(self, t: float, kind: str, payload: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, payload))

    # -- run loop

    def run(self) -> SimResult:
        while self._heap:
            t, _, kind, payload = heapq.heappop(self._heap)
            self.now = t
            if kind == "job":
                self._start_job(payload[0], t)
            elif kind == "complete":
                self._complete(t, *payload)
            elif kind == "kill":
                self._kill(t, *payload)
            elif kind == "join":
                self._register(payload[0], payload[1], now=t)
                self._pump(t)
            for trig in self._triggers:
                trig(self)
            if self.check_work_conservation:
                self._assert_conserving()
        makespan = self.now
        total_slots = sum(e.descriptor.slot_count for e in self.state.nodes.values())
        util = self._busy / (makespan * total_slots) if makespan > 0 and total_slots else 0.0
        retry = {tid: rec.retry_count for tid, rec in self.state.tasks.items()}
        return SimResult(makespan=makespan, jobs=self._stats, utilization=util,
                         busy_time=self._busy, events=self.events,
                         results=self._results, retry_counts=retry)

    def _assert_conserving(self) -> None:
        if self.state.queue and any(e.free_slots > 0 for e in self.state.nodes.values()):
            raise WorkConservationViolation(
                f"t={self.now}: queued tasks with free slots available")

    def _start_job(self, spec: JobSpec, t: float) -> None:
        driver = JobDriver(spec.job_id, spec.seq, spec.builder)
        self._drivers[spec.job_id] = driver
        self._specs[spec.job_id] = spec
        self._stats[spec.job_id] = JobStats(start=t)
        self._submit_all(driver.start(), spec.job_id, t)
        self._pump(t)

    def _submit_all(self, submissions, job_id: str, t: float) -> None:
        for sub in submissions:
            self.state.submit(sub.task_id, job_id, sub.package, t)

    def _pump(self, t: float) -> None:
        while True:
            pick = self.state.assign_next(t)
            if pick is None:
                return
            task_id, node_id, package = pick
            rec = self.state.tasks[task_id]
            spec = self._specs[rec.job_id]
            kind = self._drivers[rec.job_id].graph.kind_of(task_id)
            dur = self.model.duration(kind, spec.length)
            self._task_start[task_id] = t
            self._node_busy_since[node_id][task_id] = t
            self._push(t + dur + self.latency, "complete",
                       (node_id, task_id, self._gen[node_id], package))

    def _complete(self, t: float, node_id: str, task_id: str, gen: int,
                  package: TaskPackage) -> None:
        if self._gen.get(node_id) != gen:
            return  # node died (or rejoined) after this was scheduled
        outputs: dict[str, bytes] = {}
        if self.compute is not None:
            outputs = self.compute(package)
        self.state.on_result(task_id, outputs, None, t, node_id=node_id)
        self._busy += t - self._node_busy_since[node_id].pop(task_id)
        rec = self.state.tasks[task_id]
        driver = self._drivers[rec.job_id]
        stats = self._stats[rec.job_id]
        kind = driver.graph.kind_of(task_id)
        started = self._task_start[task_id]
        if kind.is_classifier:
            window = self._classifier_window.setdefault(rec.job_id, [started, t])
            window[0] = min(window[0], started)
            window[1] = max(window[1], t)
        elif kind in (TaskKind.PROFILE, TaskKind.CREATE_VECTOR):
            stats.init_time += t - started
        else:
            stats.final_time += t - started
        self._submit_all(driver.on_terminal(task_id, COMPLETED, outputs=outputs),
                         rec.job_id, t)
        if driver.done:
            stats.end = t
            if driver.failure is not None:
                stats.failed = True
                stats.failure = driver.failure[1]
            else:
                window = self._classifier_window.get(rec.job_id)
                if window:
                    stats.classify_time = window[1] - window[0]
                if self.compute is not None:
                    self._results[rec.job_id] = driver.output_of(
                        TaskKind.FINAL_PREDICT)["result"]
        self._pump(t)

    def _kill(self, t: float, node_id: str | None, when_running_classifier: bool) -> None:
        if node_id is None:
            node_id = self._find_classifier_node() if when_running_classifier else None
            if node_id is None:
                candidates = sorted(self.state.nodes)
                node_id = candidates[0] if candidates else None
        if node_id is None or node_id not in self.state.nodes:
            return
        self.kill_node(node_id, t)

    def kill_node(self, node_id: str, t: float | None = None) -> None:
        t = self.now if t is None else t
        # charge partial busy time for work in flight, then drop the node
        for task_id, since in self._node_busy_since.get(node_id, {}).items():
            self._busy += t - since
        self._node_busy_since[node_id] = {}
        self._gen[node_id] = self._gen.get(node_id, 0) + 1
        self.state.on_node_lost(node_id, t)
        self._pump(t)

    def _find_classifier_node(self) -> str | None:
        for node_id in sorted(self.state.nodes):
            entry = self.state.nodes[node_id]
            for task_id in entry.assigned:
                rec = self.state.tasks[task_id]
                if self._drivers[rec.job_id].graph.kind_of(task_id).is_classifier:
                    return node_id
        return None

    def running_classifier_nodes(self) -> list[str]:
        out = []
        for node_id in sorted(self.state.nodes):
            entry = self.state.nodes[node_id]
            for task_id in entry.assigned:
                rec = self.state.tasks[task_id]
                if self._drivers[rec.job_id].graph.kind_of(task_id).is_classifier:
                    out.append(node_id)
                    break
        return out


# ---------------------------------------------------------------------------
# Experiments


def _executor_set(k: int) -> list[tuple[str, int]]:
    return [(f"e{n:02d}", 1) for n in range(1, k + 1)]


def run_single_job(model: ServiceTimeModel, length: int, executors: int) -> SimResult:
    grid = VirtualGrid(model, _executor_set(executors))
    grid.add_job(JobSpec(job_id="job", length=length))
    return grid.run()


def phase_breakdown(model: ServiceTimeModel, lengths) -> tuple[list[str], list[list]]:
    """Sequential per-phase fractions of total prediction time, per length."""
    header = ["length", "init_frac", "classify_frac", "final_frac"]
    rows = []
    for length in lengths:
        init, classify, final = model.phase_times(length)
        total = init + classify + final
        rows.append([length, init / total, classify / total, final / total])
    return header, rows


def speedup_experiment(model: ServiceTimeModel, lengths=FIG10_LENGTHS,
                       executors=range(1, 7)) -> tuple[list[str], list[list]]:
    """Single-job makespan for 1..6 executors plus the reduction vs serial."""
    header = ["length", "executors", "makespan_s", "reduction_vs_serial"]
    rows = []
    for length in lengths:
        serial = run_single_job(model, length, 1).makespan
        for k in executors:
            makespan = run_single_job(model, length, k).makespan
            rows.append([length, k, makespan, 1.0 - makespan / serial])
    return header, rows


def scalability_experiment(model: ServiceTimeModel, jobs: int = 64,
                           executors=(1, 2, 4, 8, 16, 32, 36),
                           seed: int = 1,
                           length_range: tuple[int, int] = (50, 417),
                           ) -> tuple[list[str], list[list]]:
    """Makespan of a jobs-sized burst vs executor count."""
    rng = random.Random(seed)
    lengths = [rng.randint(*length_range) for _ in range(jobs)]
    header = ["executors", "jobs", "makespan_s", "speedup_vs_1", "utilization"]
    rows = []
    # one executor never idles, so its makespan is the total work
    serial = sum(model.serial_time(length) for length in lengths)
    for k in executors:
        grid = VirtualGrid(model, _executor_set(k))
        for n, length in enumerate(lengths):
            grid.add_job(JobSpec(job_id=f"j{n:03d}", length=length))
        res = grid.run()
        rows.append([k, jobs, res.makespan, serial / res.makespan, res.utilization])
    return header, rows


def format_csv(header: list[str], rows: list[list]) -> str:
    def cell(v) -> str:
        return repr(v) if isinstance(v, float) else str(v)

    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(cell(v) for v in row))
    return "\n".join(lines) + "\n"
