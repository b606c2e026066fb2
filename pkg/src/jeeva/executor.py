"""Worker node: registers with the scheduler, heartbeats, runs tasks.

Inline payloads dispatch to the prediction pipeline operations; dependency
references invoke pre-deployed commands (registered in a DependencyRegistry)
inside a fresh per-task sandbox directory with a scrubbed environment and a
wall-clock limit. Exactly one result (or abort acknowledgment) is reported
per assignment.
"""

from __future__ import annotations

import logging
import os
import shutil
import socket
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field

from . import pipeline
from .core import CLASSIFIER_NAMES, TaskKind, validate_sequence
from .protocol import (
    AbortTask,
    AssignTask,
    DEPENDENCY_REF,
    Error,
    Heartbeat,
    INLINE,
    NodeDescriptor,
    ProtocolError,
    Register,
    TaskPackage,
    TaskResult,
    encode,
    read_frame,
)
from .scheduler import ABORT_ACK

log = logging.getLogger("jeeva.executor")

DEFAULT_TASK_LIMIT_S = 300.0
DEFAULT_HEARTBEAT_S = 2.0


class ExecutorTaskError(Exception):
    """Deterministic in-task failure; reported verbatim to the scheduler."""


class UnknownDependency(ExecutorTaskError):
    def __init__(self, name: str, version: str) -> None:
        super().__init__(f"UnknownDependency: {name} {version}")


class TaskTimeout(ExecutorTaskError):
    def __init__(self, limit_s: float) -> None:
        super().__init__(f"Timeout: exceeded {limit_s:g}s wall-clock limit")


class NonZeroExit(ExecutorTaskError):
    def __init__(self, code: int, stderr_excerpt: str = "") -> None:
        self.code = code
        msg = f"NonZeroExit: exit {code}"
        if stderr_excerpt:
            msg += f": {stderr_excerpt}"
        super().__init__(msg)


class DispatchError(ExecutorTaskError):
    def __init__(self, detail: str) -> None:
        super().__init__(f"DispatchError: {detail}")


class UnknownLocalTask(Exception):
    pass


@dataclass(frozen=True)
class DependencyEntry:
    name: str
    version: str
    command: str
    fixed_args: tuple[str, ...]
    data_dir: str


class DependencyRegistry:
    """Pre-deployed dependencies available on this node, keyed by name+version."""

    def __init__(self, entries: list[DependencyEntry] | None = None):
        self._entries = {(e.name, e.version): e for e in (entries or [])}

    def lookup(self, name: str, version: str) -> DependencyEntry:
        entry = self._entries.get((name, version))
        if entry is None:
            raise UnknownDependency(name, version)
        return entry

    def __len__(self) -> int:
        return len(self._entries)

    @classmethod
    def parse_file(cls, path: str) -> "DependencyRegistry":
        """One dependency per line: <name> <version> <command> [args...] <data-dir>.

        Use '-' for an empty data directory."""
        entries = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                tokens = line.split()
                if len(tokens) < 4:
                    raise ValueError(f"{path}:{lineno}: expected "
                                     f"'name version command [args...] data-dir'")
                name, version, command = tokens[0], tokens[1], tokens[2]
                data_dir = tokens[-1]
                entries.append(DependencyEntry(
                    name=name, version=version, command=command,
                    fixed_args=tuple(tokens[3:-1]),
                    data_dir="" if data_dir == "-" else data_dir,
                ))
        return cls(entries)


class ModelSource:
    def resolve(self, ref: str) -> pipeline.SvmModel:
        raise NotImplementedError


class DirModels(ModelSource):
    """Model files deployed on the node: <dir>/<REF>.model, cached after load."""

    def __init__(self, directory: str):
        self.directory = directory
        self._cache: dict[str, pipeline.SvmModel] = {}

    def resolve(self, ref: str) -> pipeline.SvmModel:
        if ref not in self._cache:
            path = os.path.join(self.directory, f"{ref}.model")
            if not os.path.exists(path):
                raise DispatchError(f"no model file for ref {ref!r}")
            self._cache[ref] = pipeline.load_model_file(path)
        return self._cache[ref]


class DictModels(ModelSource):
    def __init__(self, models: dict[TaskKind, pipeline.SvmModel]):
        self._by_name = {CLASSIFIER_NAMES[k]: m for k, m in models.items()}

    def resolve(self, ref: str) -> pipeline.SvmModel:
        try:
            return self._by_name[ref]
        except KeyError:
            raise DispatchError(f"no model for ref {ref!r}") from None


class TaskSandbox:
    """Fresh working directory per task, removed after result delivery."""

    def __init__(self, work_root: str | None, task_id: str):
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in task_id)
        self.path = tempfile.mkdtemp(prefix=f"task-{safe}-", dir=work_root)

    def write_blobs(self, blobs: dict[str, bytes]) -> None:
        for name, data in blobs.items():
            target = os.path.join(self.path, os.path.basename(name))
            with open(target, "wb") as fh:
                fh.write(data)

    def collect(self, names: tuple[str, ...]) -> dict[str, bytes]:
        out = {}
        for name in names:
            path = os.path.join(self.path, os.path.basename(name))
            if not os.path.exists(path):
                raise ExecutorTaskError(f"missing declared output file {name!r}")
            with open(path, "rb") as fh:
                out[name] = fh.read()
        return out

    def cleanup(self) -> None:
        shutil.rmtree(self.path, ignore_errors=True)


def run_inline(package: TaskPackage, models: ModelSource) -> dict[str, bytes]:
    """Dispatch an inline payload to the pipeline operation for its kind."""
    kind = TaskKind.from_letter(package.kind)
    blobs = package.blobs
    params = package.parameters
    if kind == TaskKind.PROFILE:
        backend = params.get("backend", "onehot")
        if backend != "onehot":
            raise DispatchError(
                f"inline profile backend {backend!r} unsupported; use a "
                "dependency-reference task for external profile commands")
        seq = validate_sequence(blobs["sequence"].decode("ascii"))
        profile = pipeline.generate_profile(seq, pipeline.OneHotBackend())
        return {"profile": pipeline.array_to_blob(profile.rows)}
    if kind == TaskKind.CREATE_VECTOR:
        seq = validate_sequence(blobs["sequence"].decode("ascii"))
        profile = pipeline.Profile(pipeline.blob_to_array(blobs["profile"]))
        tables = [pipeline.load_property_table(blobs["tables"].decode("utf-8"))]
        window = int(params.get("window", pipeline.DEFAULT_WINDOW))
        features = pipeline.create_feature_vectors(profile, seq, tables, window)
        return {"features": pipeline.array_to_blob(features.vectors)}
    if kind.is_classifier:
        ref = params.get("model_ref", CLASSIFIER_NAMES[kind])
        model = models.resolve(ref)
        features = pipeline.FeatureMatrix(pipeline.blob_to_array(blobs["features"]))
        output = pipeline.run_classifier(kind, features, model)
        return {"posteriors": pipeline.array_to_blob(output.posteriors)}
    if kind == TaskKind.FINAL_PREDICT:
        seq = validate_sequence(blobs["sequence"].decode("ascii"),
                                seq_id=str(params.get("sequence_id", "")))
        outputs = []
        for ck in (TaskKind.CLASS_HH, TaskKind.CLASS_SS, TaskKind.CLASS_TT,
                   TaskKind.CLASS_HS, TaskKind.CLASS_ST, TaskKind.CLASS_TH):
            posts = pipeline.blob_to_array(blobs[f"post_{ck.letter}"])
            outputs.append(pipeline.ClassifierOutput(kind=ck, posteriors=posts))
        result = pipeline.combine_predictions(outputs, seq,
                                              job_id=str(params.get("job_id", "")))
        return {"result": pipeline.result_to_blob(result)}
    raise DispatchError(f"no inline dispatch for kind {package.kind!r}")


@dataclass
class _TaskCtx:
    task_id: str
    lock: threading.Lock = field(default_factory=threading.Lock)
    proc: subprocess.Popen | None = None
    abort_requested: bool = False
    outcome_sent: bool = False


def run_dependency(package: TaskPackage, registry: DependencyRegistry,
                   sandbox: TaskSandbox, limit_s: float,
                   ctx: _TaskCtx | None = None) -> dict[str, bytes]:
    """Spawn the registered command in the sandbox and collect outputs."""
    name, version = package.dependency
    entry = registry.lookup(name, version)
    sandbox.write_blobs(package.blobs)
    argv = [entry.command, *entry.fixed_args, *package.args]
    env = {
        "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
        "HOME": sandbox.path,
        "JEEVA_DEP_DATA": entry.data_dir,
    }
    proc = subprocess.Popen(argv, cwd=sandbox.path, env=env,
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    if ctx is not None:
        with ctx.lock:
            if ctx.abort_requested:
                proc.kill()
                proc.wait()
                raise ExecutorTaskError(ABORT_ACK)
            ctx.proc = proc
    try:
        _, stderr = proc.communicate(timeout=limit_s)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()
        raise TaskTimeout(limit_s) from None
    finally:
        if ctx is not None:
            with ctx.lock:
                ctx.proc = None
    if proc.returncode != 0:
        excerpt = stderr.decode("utf-8", "replace")[-300:].strip()
        raise NonZeroExit(proc.returncode, excerpt)
    return sandbox.collect(package.output_files)


def run_task(package: TaskPackage, models: ModelSource,
             registry: DependencyRegistry, sandbox: TaskSandbox,
             limit_s: float = DEFAULT_TASK_LIMIT_S,
             ctx: _TaskCtx | None = None) -> dict[str, bytes]:
    if package.mode == INLINE:
        return run_inline(package, models)
    if package.mode == DEPENDENCY_REF:
        return run_dependency(package, registry, sandbox, limit_s, ctx)
    raise DispatchError(f"unknown package mode {package.mode!r}")


class ExecutorService:
    """Network executor: one control connection, up to slot_count concurrent
    task sandboxes, results funneled through the ordered control stream."""

    def __init__(self, scheduler_addr: tuple[str, int], node_id: str,
                 slots: int = 1, token: str = "",
                 registry: DependencyRegistry | None = None,
                 models: ModelSource | None = None,
                 work_root: str | None = None,
                 task_limit_s: float = DEFAULT_TASK_LIMIT_S,
                 heartbeat_s: float = DEFAULT_HEARTBEAT_S,
                 keep_failed_sandbox: bool = False):
        self.scheduler_addr = scheduler_addr
        self.node_id = node_id
        self.slots = slots
        self.token = token
        self.registry = registry or DependencyRegistry()
        self.models = models or DictModels({})
        self.work_root = work_root
        self.task_limit_s = task_limit_s
        self.heartbeat_s = heartbeat_s
        self.keep_failed_sandbox = keep_failed_sandbox

        self._sock: socket.socket | None = None
        self._write_lock = threading.Lock()
        self._slots_lock = threading.Lock()
        self._running: dict[str, _TaskCtx] = {}
        self._pending_results: list[TaskResult] = []
        self._stop = threading.Event()
        self._dead = False
        self._hold_until = 0.0
        self._thread: threading.Thread | None = None
        self._registered = threading.Event()

    # -- lifecycle

    def start(self) -> "ExecutorService":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        backoff = 0.2
        while not self._stop.is_set():
            hold = self._hold_until - time.monotonic()
            if hold > 0:
                self._stop.wait(hold)
                continue
            try:
                self._connect_and_serve()
                backoff = 0.2
            except FatalExecutorError:
                log.error("executor %s: fatal, stopping", self.node_id)
                return
            except (OSError, ConnectionError, ProtocolError) as exc:
                if self._stop.is_set():
                    return
                log.info("executor %s: connection lost (%s); retrying in %.1fs",
                         self.node_id, exc, backoff)
                self._stop.wait(backoff)
                backoff = min(backoff * 2, 5.0)

    def stop(self) -> None:
        self._stop.set()
        self._close_sock()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def drop_connection(self, hold_s: float = 0.0) -> None:
        """Sever the control connection without dying; the service reconnects
        after `hold_s` (partition-injection tests)."""
        self._hold_until = time.monotonic() + hold_s
        self._close_sock()

    def kill(self) -> None:
        """Abrupt death for fault-injection tests: no more traffic, ever."""
        self._dead = True
        self._stop.set()
        with self._slots_lock:
            ctxs = list(self._running.values())
        for ctx in ctxs:
            with ctx.lock:
                if ctx.proc is not None:
                    ctx.proc.kill()
        self._close_sock()

    def wait_registered(self, timeout: float = 5.0) -> bool:
        return self._registered.wait(timeout)

    def _close_sock(self) -> None:
        sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()

    # -- control connection

    def _connect_and_serve(self) -> None:
        sock = socket.create_connection(self.scheduler_addr, timeout=10)
        sock.settimeout(None)
        self._sock = sock
        descriptor = NodeDescriptor(node_id=self.node_id,
                                    address=f"{sock.getsockname()[0]}:{sock.getsockname()[1]}",
                                    slot_count=self.slots, joined_at=time.time())
        self._send(Register(descriptor=descriptor, token=self.token))
        self._registered.set()
        hb = threading.Thread(target=self._heartbeat_loop, args=(sock,), daemon=True)
        hb.start()
        self._flush_pending()
        try:
            while not self._stop.is_set():
                msg = read_frame(sock)
                if msg is None:
                    raise ConnectionError("scheduler closed connection")
                self._dispatch(msg)
        finally:
            self._close_sock()

    def _heartbeat_loop(self, sock: socket.socket) -> None:
        while not self._stop.is_set() and self._sock is sock:
            with self._slots_lock:
                running = tuple(self._running)
            try:
                self._send(Heartbeat(node_id=self.node_id, running=running))
            except (OSError, ConnectionError):
                self._close_sock()
                return
            self._stop.wait(self.heartbeat_s)

    def _send(self, msg) -> None:
        if self._dead:
            return
        with self._write_lock:
            sock = self._sock
            if sock is None:
                raise ConnectionError("not connected")
            sock.sendall(encode(msg))

    def _send_result(self, result: TaskResult) -> None:
        try:
            self._send(result)
        except (OSError, ConnectionError):
            if not self._dead:
                self._pending_results.append(result)

    def _flush_pending(self) -> None:
        pending, self._pending_results = self._pending_results, []
        for result in pending:
            self._send_result(result)

    def _dispatch(self, msg) -> None:
        if isinstance(msg, AssignTask):
            self._handle_assign(msg)
        elif isinstance(msg, AbortTask):
            self.handle_abort(msg.task_id)
        elif isinstance(msg, Error):
            if msg.code == "Unauthorized":
                raise FatalExecutorError(msg.detail)
            log.warning("executor %s: scheduler error %s: %s",
                        self.node_id, msg.code, msg.detail)
        else:
            log.warning("executor %s: unexpected %s", self.node_id, type(msg).__name__)

    # -- task execution

    def _handle_assign(self, msg: AssignTask) -> None:
        with self._slots_lock:
            if len(self._running) >= self.slots:
                self._send_result(TaskResult(task_id=msg.task_id,
                                             error="SlotExhausted: no free slot"))
                return
            ctx = _TaskCtx(task_id=msg.task_id)
            self._running[msg.task_id] = ctx
        t = threading.Thread(target=self._run_and_report, args=(msg, ctx), daemon=True)
        t.start()

    def _run_and_report(self, msg: AssignTask, ctx: _TaskCtx) -> None:
        sandbox = TaskSandbox(self.work_root, msg.task_id)
        outputs: dict[str, bytes] | None = None
        error = ""
        try:
            outputs = run_task(msg.package, self.models, self.registry, sandbox,
                               limit_s=self.task_limit_s, ctx=ctx)
        except Exception as exc:
            error = str(exc) or type(exc).__name__
        with ctx.lock:
            aborted = ctx.abort_requested
            ctx.outcome_sent = True
        if aborted:
            result = TaskResult(task_id=msg.task_id, error=ABORT_ACK)
        elif outputs is not None:
            result = TaskResult(task_id=msg.task_id, outputs=outputs)
        else:
            result = TaskResult(task_id=msg.task_id, error=error)
        self._send_result(result)
        with self._slots_lock:
            self._running.pop(msg.task_id, None)
        if error and self.keep_failed_sandbox:
            log.info("keeping failed sandbox %s", sandbox.path)
        else:
            sandbox.cleanup()

    def handle_abort(self, task_id: str) -> None:
        with self._slots_lock:
            ctx = self._running.get(task_id)
        if ctx is None:
            try:
                self._send(Error(code="UnknownLocalTask", ref=task_id))
            except (OSError, ConnectionError):
                pass
            return
        with ctx.lock:
            if ctx.outcome_sent:
                return  # natural completion won the race; one outcome only
            ctx.abort_requested = True
            if ctx.proc is not None:
                ctx.proc.kill()


class FatalExecutorError(Exception):
    pass
