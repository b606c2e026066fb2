"""Networked front of the scheduler state machine.

One TCP listener serves executors and task clients. All state transitions
funnel through a single lock, giving the serial event-loop semantics the
state machine expects; queries answer from the same consistent state.
A monitor thread declares nodes dead after missed heartbeats and re-queues
their work.
"""

from __future__ import annotations

import logging
import socket
import threading
import time

from .core import UnknownTask
from .protocol import (
    AbortTask,
    AssignTask,
    Error,
    Heartbeat,
    MembershipQuery,
    MembershipReply,
    QueryTask,
    Register,
    StatsQuery,
    StatsReply,
    SubmitAck,
    SubmitTask,
    TaskResult,
    TaskStatus,
    encode,
    read_frame,
)
from .scheduler import (
    COMPLETED,
    DEFAULT_DEAD_AFTER,
    DEFAULT_HEARTBEAT_MS,
    AlreadyTerminal,
    DuplicateTask,
    NotRunning,
    SchedulerState,
    Unauthorized,
    UnknownNode,
)

log = logging.getLogger("jeeva.scheduler")
event_log = logging.getLogger("jeeva.scheduler.events")


class _Conn:
    def __init__(self, sock: socket.socket, peer: str):
        self.sock = sock
        self.peer = peer
        self.node_id: str | None = None
        self.write_lock = threading.Lock()
        self.closed = False

    def send(self, msg) -> None:
        with self.write_lock:
            self.sock.sendall(encode(msg))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class SchedulerServer:
    def __init__(self, listen: tuple[str, int] = ("127.0.0.1", 0),
                 token: str | None = None,
                 heartbeat_ms: int = DEFAULT_HEARTBEAT_MS,
                 dead_after: int = DEFAULT_DEAD_AFTER,
                 event_sink=None):
        self._extra_sink = event_sink
        self.state = SchedulerState(token=token, event_sink=self._record_event)
        self.heartbeat_s = heartbeat_ms / 1000.0
        self.dead_after_s = self.heartbeat_s * dead_after
        self._lock = threading.RLock()
        self._node_conns: dict[str, _Conn] = {}
        self._listener = socket.create_server(listen)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # -- lifecycle

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> "SchedulerServer":
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        monitor = threading.Thread(target=self._monitor_loop, daemon=True)
        accept.start()
        monitor.start()
        self._threads += [accept, monitor]
        log.info("scheduler listening on %s:%d", *self.address)
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for conn in list(self._node_conns.values()):
                conn.close()
            self._node_conns.clear()

    def _record_event(self, event: dict) -> None:
        fieldstr = " ".join(f"{k}={v}" for k, v in event.items() if k not in ("event", "t"))
        event_log.info("t=%.3f event=%s %s", event["t"], event["event"], fieldstr)
        if self._extra_sink is not None:
            self._extra_sink(event)

    # -- accept / per-connection loop

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            conn = _Conn(sock, f"{addr[0]}:{addr[1]}")
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()

    def _serve_conn(self, conn: _Conn) -> None:
        try:
            while not self._stop.is_set():
                msg = read_frame(conn.sock)
                if msg is None:
                    break
                self._handle(conn, msg)
        except Exception as exc:
            if not self._stop.is_set() and not conn.closed:
                log.info("connection %s dropped: %s", conn.peer, exc)
        finally:
            self._on_disconnect(conn)
            conn.close()

    def _on_disconnect(self, conn: _Conn) -> None:
        with self._lock:
            node_id = conn.node_id
            if node_id is not None and self._node_conns.get(node_id) is conn:
                del self._node_conns[node_id]
                try:
                    self.state.on_node_lost(node_id, self._now())
                except UnknownNode:
                    pass
                self._pump()

    def _now(self) -> float:
        return time.monotonic()

    # -- message dispatch

    def _handle(self, conn: _Conn, msg) -> None:
        with self._lock:
            now = self._now()
            if isinstance(msg, Register):
                self._handle_register(conn, msg, now)
            elif isinstance(msg, Heartbeat):
                try:
                    self.state.heartbeat(msg.node_id, now)
                except UnknownNode:
                    log.info("heartbeat from unknown node %s", msg.node_id)
            elif isinstance(msg, TaskResult):
                self._handle_result(conn, msg, now)
            elif isinstance(msg, SubmitTask):
                self._handle_submit(conn, msg, now)
            elif isinstance(msg, QueryTask):
                self._handle_query(conn, msg)
            elif isinstance(msg, AbortTask):
                self._handle_abort(conn, msg, now)
            elif isinstance(msg, MembershipQuery):
                conn.send(MembershipReply(nodes=tuple(self.state.membership())))
            elif isinstance(msg, StatsQuery):
                s = self.state.stats()
                conn.send(StatsReply(waiting=s.waiting, running=s.running,
                                     finished=s.finished))
            elif isinstance(msg, Error):
                log.info("peer error from %s: %s %s", conn.peer, msg.code, msg.detail)
            else:
                conn.send(Error(code="BadRequest",
                                detail=f"unexpected {type(msg).__name__}"))

    def _handle_register(self, conn: _Conn, msg: Register, now: float) -> None:
        try:
            self.state.register_node(msg.descriptor, now, token=msg.token)
        except Unauthorized as exc:
            try:
                conn.send(Error(code="Unauthorized", detail=str(exc)))
            except OSError:
                pass
            conn.close()
            return
        node_id = msg.descriptor.node_id
        old = self._node_conns.get(node_id)
        if old is not None and old is not conn:
            old.node_id = None
            old.close()
        conn.node_id = node_id
        self._node_conns[node_id] = conn
        self._pump()

    def _handle_result(self, conn: _Conn, msg: TaskResult, now: float) -> None:
        try:
            self.state.on_result(msg.task_id, msg.outputs, msg.error, now,
                                 node_id=conn.node_id)
        except (UnknownTask, NotRunning) as exc:
            log.info("discarding result for %s from %s: %s",
                     msg.task_id, conn.peer, exc)
        self._pump()

    def _handle_submit(self, conn: _Conn, msg: SubmitTask, now: float) -> None:
        try:
            self.state.submit(msg.task_id, msg.job_id, msg.package, now,
                              token=msg.token)
        except DuplicateTask:
            conn.send(Error(code="DuplicateTask", ref=msg.task_id))
            return
        except Unauthorized as exc:
            conn.send(Error(code="Unauthorized", detail=str(exc)))
            return
        conn.send(SubmitAck(task_id=msg.task_id))
        self._pump()

    def _handle_query(self, conn: _Conn, msg: QueryTask) -> None:
        try:
            rec = self.state.query(msg.task_id)
        except UnknownTask:
            conn.send(Error(code="UnknownTask", ref=msg.task_id))
            return
        outputs = rec.outputs if (rec.state == COMPLETED and rec.outputs) else {}
        conn.send(TaskStatus(task_id=msg.task_id, state=rec.state,
                             detail=rec.failure_reason, retry_count=rec.retry_count,
                             outputs=outputs))

    def _handle_abort(self, conn: _Conn, msg: AbortTask, now: float) -> None:
        try:
            outcome = self.state.abort(msg.task_id, now)
        except UnknownTask:
            conn.send(Error(code="UnknownTask", ref=msg.task_id))
            return
        except AlreadyTerminal as exc:
            conn.send(Error(code="AlreadyTerminal", ref=msg.task_id, detail=str(exc)))
            return
        if outcome == "abort_requested":
            rec = self.state.query(msg.task_id)
            node_conn = self._node_conns.get(rec.node_id or "")
            if node_conn is not None:
                try:
                    node_conn.send(AbortTask(task_id=msg.task_id))
                except OSError:
                    pass
        rec = self.state.query(msg.task_id)
        conn.send(TaskStatus(task_id=msg.task_id, state=rec.state,
                             detail=rec.failure_reason, retry_count=rec.retry_count))

    # -- assignment pushes

    def _pump(self) -> None:
        """Assign queued work until nothing fits; push AssignTask frames."""
        while True:
            pick = self.state.assign_next(self._now())
            if pick is None:
                return
            task_id, node_id, package = pick
            conn = self._node_conns.get(node_id)
            if conn is None:
                self._declare_lost(node_id)
                continue
            try:
                conn.send(AssignTask(task_id=task_id, package=package))
            except OSError:
                conn.close()
                self._declare_lost(node_id)

    def _declare_lost(self, node_id: str) -> None:
        self._node_conns.pop(node_id, None)
        try:
            self.state.on_node_lost(node_id, self._now())
        except UnknownNode:
            pass

    # -- failure detection

    def _monitor_loop(self) -> None:
        interval = max(self.heartbeat_s / 2, 0.01)
        while not self._stop.wait(interval):
            with self._lock:
                for node_id in self.state.find_dead(self._now(), self.dead_after_s):
                    log.info("node %s missed heartbeats; declaring dead", node_id)
                    conn = self._node_conns.pop(node_id, None)
                    if conn is not None:
                        conn.node_id = None
                        conn.close()
                    try:
                        self.state.on_node_lost(node_id, self._now())
                    except UnknownNode:
                        pass
                self._pump()
