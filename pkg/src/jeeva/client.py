"""Task client: drives prediction jobs through the grid.

`JobDriver` is the pure DAG state machine: fed terminal task states, it
decides which tasks to submit next (A first, then B, then C..H together,
then I). `GridClient` is the request/reply TCP wrapper around the wire
protocol, and `TaskClientService` bridges the portal's persistent request
queue to the grid: claim, drive, record, notify.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass

from . import pipeline
from .core import (
    CLASSIFIER_KINDS,
    CLASSIFIER_NAMES,
    PredictionResult,
    ProteinSequence,
    TaskKind,
    build_prediction_dag,
    ready_tasks,
    task_id_for,
)
from .protocol import (
    AbortTask,
    Error,
    MembershipQuery,
    MembershipReply,
    ProtocolError,
    QueryTask,
    StatsQuery,
    StatsReply,
    SubmitAck,
    SubmitTask,
    TaskPackage,
    TaskStatus,
    encode,
    read_frame,
)
from .scheduler import ABORTED, COMPLETED, FAILED, TERMINAL_STATES

log = logging.getLogger("jeeva.client")

DEFAULT_POLL_MS = 2000


class JobFailed(Exception):
    def __init__(self, task_id: str, reason: str) -> None:
        self.task_id = task_id
        self.reason = reason
        super().__init__(f"task {task_id} failed: {reason}")


class SchedulerUnreachable(ConnectionError):
    pass


@dataclass(frozen=True)
class Submission:
    task_id: str
    package: TaskPackage


class PackageBuilder:
    """Builds the payload for one task kind from the job's upstream outputs."""

    def build(self, kind: TaskKind, driver: "JobDriver") -> TaskPackage:
        raise NotImplementedError


class JobDriver:
    """DAG state machine for one prediction job.

    Call `start()` for the initial submissions, then `on_terminal()` for
    every task that reaches a terminal state; each call returns the next
    batch of submissions. Tasks are only ever submitted when every
    predecessor has completed.
    """

    def __init__(self, job_id: str, seq: ProteinSequence, builder: PackageBuilder):
        self.job_id = job_id
        self.seq = seq
        self.builder = builder
        self.graph = build_prediction_dag(seq, job_id)
        self.completed: set[str] = set()
        self.submitted: set[str] = set()
        self.outputs: dict[str, dict[str, bytes]] = {}
        self.failure: tuple[str, str] | None = None

    def start(self) -> list[Submission]:
        return self._advance()

    def on_terminal(self, task_id: str, state: str,
                    outputs: dict[str, bytes] | None = None,
                    reason: str = "") -> list[Submission]:
        if state == COMPLETED:
            self.completed.add(task_id)
            self.outputs[task_id] = outputs or {}
            return self._advance()
        if state in (FAILED, ABORTED):
            self.failure = (task_id, reason or state)
            return []
        raise ValueError(f"{state} is not a terminal state")

    def _advance(self) -> list[Submission]:
        if self.failure is not None:
            return []
        ready = sorted(ready_tasks(self.graph, self.completed) - self.submitted)
        subs = []
        for task_id in ready:
            kind = self.graph.kind_of(task_id)
            subs.append(Submission(task_id, self.builder.build(kind, self)))
            self.submitted.add(task_id)
        return subs

    def output_of(self, kind: TaskKind) -> dict[str, bytes]:
        return self.outputs[task_id_for(self.job_id, kind)]

    @property
    def done(self) -> bool:
        return self.failure is not None or len(self.completed) == len(self.graph.nodes)

    def result(self) -> PredictionResult:
        if self.failure is not None:
            raise JobFailed(*self.failure)
        blob = self.output_of(TaskKind.FINAL_PREDICT)["result"]
        return pipeline.result_from_blob(blob)


class PipelinePackageBuilder(PackageBuilder):
    """Real prediction payloads.

    Feature blobs travel inline; classifier models are named references
    resolved against each executor's locally deployed model files. Stage A
    uses the built-in one-hot backend unless an external profile dependency
    (a pre-deployed command) is configured.
    """

    def __init__(self, tables_text: str, window: int = pipeline.DEFAULT_WINDOW,
                 profile_dependency: tuple[str, str] | None = None,
                 profile_args: tuple[str, ...] = ()):
        self.tables_text = tables_text
        self.window = window
        self.profile_dependency = profile_dependency
        self.profile_args = profile_args

    def build(self, kind: TaskKind, driver: JobDriver) -> TaskPackage:
        seq_blob = driver.seq.residues.encode("ascii")
        if kind == TaskKind.PROFILE:
            if self.profile_dependency is not None:
                name, version = self.profile_dependency
                fasta = f">{driver.seq.id or driver.job_id}\n{driver.seq.residues}\n"
                return TaskPackage.dependency_ref(
                    name, version, args=self.profile_args,
                    blobs={"query.fasta": fasta.encode("ascii")},
                    output_files=("pssm.txt",),
                )
            return TaskPackage.inline("A", {"backend": "onehot"},
                                      {"sequence": seq_blob})
        if kind == TaskKind.CREATE_VECTOR:
            a_out = driver.output_of(TaskKind.PROFILE)
            if "profile" in a_out:
                profile_blob = a_out["profile"]
            else:
                # external backend returned the raw PSSM text
                seq = driver.seq
                profile = pipeline.parse_pssm(a_out["pssm.txt"].decode("utf-8"),
                                              expected=seq)
                profile_blob = pipeline.array_to_blob(profile.rows)
            return TaskPackage.inline(
                "B", {"window": self.window},
                {"profile": profile_blob, "sequence": seq_blob,
                 "tables": self.tables_text.encode("utf-8")},
            )
        if kind in CLASSIFIER_KINDS:
            features = driver.output_of(TaskKind.CREATE_VECTOR)["features"]
            return TaskPackage.inline(
                kind.letter, {"model_ref": CLASSIFIER_NAMES[kind]},
                {"features": features},
            )
        if kind == TaskKind.FINAL_PREDICT:
            blobs = {"sequence": seq_blob}
            for ck in CLASSIFIER_KINDS:
                blobs[f"post_{ck.letter}"] = driver.output_of(ck)["posteriors"]
            return TaskPackage.inline(
                "I", {"job_id": driver.job_id, "sequence_id": driver.seq.id}, blobs)
        raise ValueError(f"no payload for {kind.name}")


class NullPackageBuilder(PackageBuilder):
    """Empty payloads for timing-only simulations."""

    def build(self, kind: TaskKind, driver: JobDriver) -> TaskPackage:
        return TaskPackage.inline(kind.letter, {}, {})


class SleepPackageBuilder(PackageBuilder):
    """Dependency-reference payloads that invoke a pre-deployed sleep command,
    used to validate the simulator against a real deployment."""

    def __init__(self, durations: dict[TaskKind, float],
                 dependency: tuple[str, str] = ("sleep", "1")):
        self.durations = durations
        self.dependency = dependency

    def build(self, kind: TaskKind, driver: JobDriver) -> TaskPackage:
        name, version = self.dependency
        return TaskPackage.dependency_ref(
            name, version, args=(f"{self.durations[kind]:.3f}",))


# ---------------------------------------------------------------------------
# TCP client


class GridError(Exception):
    """Operation rejected by the scheduler (wire-level Error reply)."""

    def __init__(self, code: str, detail: str = "", ref: str = "") -> None:
        self.code = code
        self.ref = ref
        super().__init__(f"{code}: {detail}" if detail else code)


class GridClient:
    """Blocking request/reply client for the scheduler's TCP endpoint."""

    def __init__(self, address: tuple[str, int], token: str = "",
                 timeout_s: float = 30.0):
        self.address = address
        self.token = token
        self.timeout_s = timeout_s
        self._sock: socket.socket | None = None
        self._lock = threading.RLock()  # close() runs inside _request's hold

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                sock = socket.create_connection(self.address, timeout=self.timeout_s)
            except OSError as exc:
                raise SchedulerUnreachable(str(exc)) from None
            sock.settimeout(self.timeout_s)
            self._sock = sock
        return self._sock

    def close(self) -> None:
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                finally:
                    self._sock = None

    def _request(self, msg):
        with self._lock:
            try:
                sock = self._connect()
                sock.sendall(encode(msg))
                reply = read_frame(sock)
            except (OSError, ConnectionError, ProtocolError) as exc:
                self.close()
                raise SchedulerUnreachable(str(exc)) from None
            if reply is None:
                self.close()
                raise SchedulerUnreachable("scheduler closed the connection")
            if isinstance(reply, Error):
                raise GridError(reply.code, reply.detail, reply.ref)
            return reply

    def submit(self, task_id: str, job_id: str, package: TaskPackage) -> None:
        reply = self._request(SubmitTask(task_id=task_id, job_id=job_id,
                                         package=package, token=self.token))
        if not isinstance(reply, SubmitAck):
            raise GridError("BadReply", f"unexpected {type(reply).__name__}")

    def query(self, task_id: str) -> TaskStatus:
        reply = self._request(QueryTask(task_id=task_id))
        if not isinstance(reply, TaskStatus):
            raise GridError("BadReply", f"unexpected {type(reply).__name__}")
        return reply

    def abort(self, task_id: str) -> TaskStatus:
        reply = self._request(AbortTask(task_id=task_id))
        if not isinstance(reply, TaskStatus):
            raise GridError("BadReply", f"unexpected {type(reply).__name__}")
        return reply

    def membership(self) -> MembershipReply:
        reply = self._request(MembershipQuery())
        if not isinstance(reply, MembershipReply):
            raise GridError("BadReply", f"unexpected {type(reply).__name__}")
        return reply

    def stats(self) -> StatsReply:
        reply = self._request(StatsQuery())
        if not isinstance(reply, StatsReply):
            raise GridError("BadReply", f"unexpected {type(reply).__name__}")
        return reply


def drive_job(grid: GridClient, driver: JobDriver, poll_s: float = 0.1,
              task_log=None, decode_result: bool = True) -> PredictionResult | None:
    """Submit the job's tasks in precedence order and poll to completion.

    Raises JobFailed as soon as any task fails; the scheduler does not retry
    deterministic in-task failures, so there is nothing to wait for. Pass
    decode_result=False for payloads (fake/sleep tasks) that produce no
    final prediction blob.
    """

    def _log(line: str) -> None:
        if task_log is not None:
            task_log(line)

    in_flight: set[str] = set()

    def _submit_all(subs: list[Submission]) -> None:
        for sub in subs:
            grid.submit(sub.task_id, driver.job_id, sub.package)
            in_flight.add(sub.task_id)
            _log(f"submitted {sub.task_id}")

    _submit_all(driver.start())
    while not driver.done:
        time.sleep(poll_s)
        for task_id in sorted(in_flight):
            status = grid.query(task_id)
            if status.state not in TERMINAL_STATES:
                continue
            in_flight.discard(task_id)
            _log(f"{status.state} {task_id}"
                 + (f" reason={status.detail}" if status.detail else ""))
            _submit_all(driver.on_terminal(
                task_id, status.state, outputs=status.outputs, reason=status.detail))
            if driver.failure is not None:
                break
    if not decode_result:
        if driver.failure is not None:
            raise JobFailed(*driver.failure)
        return None
    return driver.result()


# ---------------------------------------------------------------------------
# Store-polling service


class TaskClientService:
    """Polls the request store, drives each claimed request through the grid,
    and writes results, per-task logs and outbox notifications back."""

    def __init__(self, store, grid_address: tuple[str, int], models_dir: str,
                 token: str = "", poll_ms: int = DEFAULT_POLL_MS,
                 task_poll_ms: int = 100, window: int | None = None):
        from .fixtures import load_model_dir  # local import to avoid cycles

        self.store = store
        self.grid_address = grid_address
        self.token = token
        self.poll_s = poll_ms / 1000.0
        self.task_poll_s = task_poll_ms / 1000.0
        self.models_dir = models_dir
        _, tables = load_model_dir(models_dir)
        self.tables = tables
        self.builder = PipelinePackageBuilder(
            tables_text="".join(pipeline.dump_property_table(t) for t in tables),
            window=window or pipeline.DEFAULT_WINDOW,
        )
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def stop(self) -> None:
        self._stop.set()

    def run_forever(self) -> None:
        self.resend_notifications()
        while not self._stop.is_set():
            try:
                self.poll_once()
            except Exception:
                log.exception("poll failed; retrying next interval")
            self._stop.wait(self.poll_s)
            self._reap()
        for t in self._threads:
            t.join()

    def _reap(self) -> None:
        self._threads = [t for t in self._threads if t.is_alive()]

    def poll_once(self) -> int:
        """Claim every pending request and launch a driver thread per job."""
        claimed = self.store.claim_pending()
        for request in claimed:
            t = threading.Thread(target=self._run_job, args=(request,), daemon=True)
            t.start()
            self._threads.append(t)
        return len(claimed)

    def _run_job(self, request) -> None:
        job_id = request.request_id
        lines: list[str] = []

        def task_log(line: str) -> None:
            lines.append(line)
            self.store.append_task_log(job_id, line)

        grid = GridClient(self.grid_address, token=self.token)
        try:
            seq = ProteinSequence(id=request.header, residues=request.sequence)
            driver = JobDriver(job_id, seq, self.builder)
            result = drive_job(grid, driver, poll_s=self.task_poll_s, task_log=task_log)
            self.record_outcome(job_id, result=result, notify=request.notify_email)
        except JobFailed as exc:
            task_log(f"job failed at {exc.task_id}: {exc.reason}")
            self.record_outcome(job_id, failure=f"{exc.task_id}: {exc.reason}",
                                notify=request.notify_email)
        except SchedulerUnreachable:
            log.warning("scheduler unreachable; releasing %s for re-dispatch", job_id)
            self.store.release_request(job_id)
        except Exception as exc:  # defensive: never drop a claimed request
            log.exception("job %s crashed", job_id)
            task_log(f"job error: {exc}")
            self.record_outcome(job_id, failure=str(exc), notify=request.notify_email)
        finally:
            grid.close()

    def record_outcome(self, job_id: str, result: PredictionResult | None = None,
                       failure: str = "", notify: str = "") -> None:
        if result is not None:
            self.store.complete_request(job_id, result)
        else:
            self.store.fail_request(job_id, failure)
        if notify:
            self.store.write_outbox(job_id, notify)

    def resend_notifications(self) -> None:
        """Idempotent crash recovery: outbox files are keyed by job id, so a
        crash between persisting the outcome and notifying is repaired here."""
        for request in self.store.terminal_requests():
            if request.notify_email:
                self.store.write_outbox(request.request_id, request.notify_email)
