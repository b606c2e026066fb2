"""Dependency-agnostic task scheduler state machine.

Queues submitted tasks, tracks executor membership, assigns work FIFO to
the executor with the most free slots, re-queues work lost to dead nodes,
and answers status/stats/membership queries.

The class is a pure state machine: no clock, no sockets. Callers supply
`now` timestamps and funnel all mutations through one logical event loop
(a lock in the TCP server, the event heap in the simulator). Queries read
the state produced by that loop.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .core import UnknownTask
from .protocol import NodeDescriptor, NodeStatus, TaskPackage

QUEUED = "queued"
RUNNING = "running"
COMPLETED = "completed"
FAILED = "failed"
ABORTED = "aborted"
TERMINAL_STATES = frozenset({COMPLETED, FAILED, ABORTED})

# Reserved failure reason an executor reports to acknowledge an abort.
ABORT_ACK = "aborted by request"

DEFAULT_HEARTBEAT_MS = 2000
DEFAULT_DEAD_AFTER = 3  # missed heartbeats


class SchedulerError(Exception):
    pass


class DuplicateTask(SchedulerError):
    pass


class NotRunning(SchedulerError):
    pass


class UnknownNode(SchedulerError):
    pass


class AlreadyTerminal(SchedulerError):
    pass


class Unauthorized(SchedulerError):
    pass


@dataclass
class TaskRecord:
    task_id: str
    job_id: str
    package: TaskPackage
    state: str = QUEUED
    node_id: str | None = None
    retry_count: int = 0
    submitted_at: float = 0.0
    transitions: list[tuple[str, float]] = field(default_factory=list)
    failure_reason: str = ""
    outputs: dict[str, bytes] | None = None
    pending_abort: bool = False
    past_nodes: set[str] = field(default_factory=set)

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES


@dataclass(frozen=True)
class QueueStats:
    waiting: int
    running: int
    finished: int

    @property
    def total(self) -> int:
        return self.waiting + self.running + self.finished


@dataclass
class ExecutorEntry:
    descriptor: NodeDescriptor
    free_slots: int
    last_heartbeat: float
    assigned: set[str] = field(default_factory=set)


class FifoMostFreePolicy:
    """Default policy: oldest queued task to the executor with the most free
    slots, ties broken by smallest node id."""

    def select(self, queue: list[TaskRecord], nodes: list[ExecutorEntry]):
        if not queue:
            return None
        candidates = [e for e in nodes if e.free_slots >= 1]
        if not candidates:
            return None
        chosen = min(candidates, key=lambda e: (-e.free_slots, e.descriptor.node_id))
        return queue[0].task_id, chosen.descriptor.node_id


class SchedulerState:
    """In-memory scheduler core. Not thread-safe by itself; serialize calls."""

    def __init__(self, policy=None, token: str | None = None, event_sink=None):
        self.policy = policy or FifoMostFreePolicy()
        self.token = token
        self.event_sink = event_sink
        self.tasks: dict[str, TaskRecord] = {}
        self.queue: deque[str] = deque()
        self.nodes: dict[str, ExecutorEntry] = {}
        self.accepted = 0
        self._running = 0
        self._finished = 0

    # -- events

    def _event(self, name: str, now: float, **extra) -> None:
        if self.event_sink is not None:
            self.event_sink({"event": name, "t": now, **extra})

    def _check_token(self, token: str | None) -> None:
        if self.token is not None and token != self.token:
            raise Unauthorized("bad or missing token")

    # -- membership

    def register_node(self, descriptor: NodeDescriptor, now: float,
                      token: str | None = None) -> None:
        self._check_token(token)
        if descriptor.node_id in self.nodes:
            # re-registration of a live id is a node restart
            self.on_node_lost(descriptor.node_id, now)
        self.nodes[descriptor.node_id] = ExecutorEntry(
            descriptor=descriptor, free_slots=descriptor.slot_count, last_heartbeat=now,
        )
        self._event("node_registered", now, node=descriptor.node_id,
                    slots=descriptor.slot_count)

    def heartbeat(self, node_id: str, now: float) -> None:
        entry = self.nodes.get(node_id)
        if entry is None:
            raise UnknownNode(node_id)
        entry.last_heartbeat = now

    def find_dead(self, now: float, dead_after_s: float) -> list[str]:
        return [nid for nid, e in self.nodes.items()
                if now - e.last_heartbeat > dead_after_s]

    def on_node_lost(self, node_id: str, now: float) -> list[str]:
        """Remove a node; re-queue its running tasks (tail of the FIFO)."""
        entry = self.nodes.pop(node_id, None)
        if entry is None:
            raise UnknownNode(node_id)
        requeued: list[str] = []
        for task_id in sorted(entry.assigned):
            rec = self.tasks[task_id]
            rec.past_nodes.add(node_id)
            rec.node_id = None
            self._running -= 1
            if rec.pending_abort:
                rec.state = ABORTED
                rec.transitions.append((ABORTED, now))
                self._finished += 1
                self._event("aborted", now, task=task_id, node=node_id)
            else:
                rec.state = QUEUED
                rec.retry_count += 1
                rec.transitions.append((QUEUED, now))
                self.queue.append(task_id)
                requeued.append(task_id)
                self._event("requeued", now, task=task_id, node=node_id,
                            retry=rec.retry_count)
        self._event("node_lost", now, node=node_id)
        return requeued

    # -- task lifecycle

    def submit(self, task_id: str, job_id: str, package: TaskPackage, now: float,
               token: str | None = None) -> None:
        self._check_token(token)
        if task_id in self.tasks:
            raise DuplicateTask(task_id)
        rec = TaskRecord(task_id=task_id, job_id=job_id, package=package,
                         submitted_at=now, transitions=[(QUEUED, now)])
        self.tasks[task_id] = rec
        self.queue.append(task_id)
        self.accepted += 1
        self._event("submitted", now, task=task_id, job=job_id)

    def assign_next(self, now: float) -> tuple[str, str, TaskPackage] | None:
        """One scheduling step; call repeatedly until it returns None."""
        queued = [self.tasks[tid] for tid in self.queue]
        pick = self.policy.select(queued, list(self.nodes.values()))
        if pick is None:
            return None
        task_id, node_id = pick
        rec = self.tasks[task_id]
        entry = self.nodes[node_id]
        if rec.state != QUEUED or entry.free_slots < 1:
            raise SchedulerError(f"policy picked invalid pair {task_id}/{node_id}")
        self.queue.remove(task_id)
        rec.state = RUNNING
        rec.node_id = node_id
        rec.transitions.append((RUNNING, now))
        entry.free_slots -= 1
        entry.assigned.add(task_id)
        self._running += 1
        self._event("assigned", now, task=task_id, node=node_id)
        return task_id, node_id, rec.package

    def _release_slot(self, rec: TaskRecord) -> None:
        entry = self.nodes.get(rec.node_id or "")
        if entry is not None and rec.task_id in entry.assigned:
            entry.assigned.discard(rec.task_id)
            entry.free_slots += 1

    def on_result(self, task_id: str, outputs: dict[str, bytes] | None,
                  error: str | None, now: float, node_id: str | None = None) -> bool:
        """Apply an executor's result. Returns False when the result is a
        stale delivery from a node the task was already taken away from."""
        rec = self.tasks.get(task_id)
        if rec is None:
            raise UnknownTask(task_id)
        if rec.state != RUNNING:
            if node_id is not None and node_id in rec.past_nodes:
                self._event("stale_result_discarded", now, task=task_id, node=node_id)
                return False
            raise NotRunning(f"{task_id} is {rec.state}")
        if node_id is not None and node_id != rec.node_id:
            if node_id in rec.past_nodes:
                self._event("stale_result_discarded", now, task=task_id, node=node_id)
                return False
            raise NotRunning(f"{task_id} is not running on {node_id}")
        self._release_slot(rec)
        reporting = node_id or rec.node_id
        if rec.node_id is not None:
            rec.past_nodes.add(rec.node_id)
        self._running -= 1
        self._finished += 1
        if outputs is not None:
            rec.state = COMPLETED
            rec.outputs = outputs
            rec.transitions.append((COMPLETED, now))
            self._event("completed", now, task=task_id, node=reporting)
        elif rec.pending_abort:
            rec.state = ABORTED
            rec.transitions.append((ABORTED, now))
            self._event("aborted", now, task=task_id, node=reporting)
        else:
            rec.state = FAILED
            rec.failure_reason = error or ""
            rec.transitions.append((FAILED, now))
            self._event("failed", now, task=task_id, node=reporting, reason=rec.failure_reason)
        rec.node_id = None
        return True

    def abort(self, task_id: str, now: float) -> str:
        """Abort a task. Returns the resulting state: 'aborted' right away for
        queued tasks, 'abort_requested' while waiting for the executor."""
        rec = self.tasks.get(task_id)
        if rec is None:
            raise UnknownTask(task_id)
        if rec.terminal:
            raise AlreadyTerminal(f"{task_id} is {rec.state}")
        if rec.state == QUEUED:
            self.queue.remove(task_id)
            rec.state = ABORTED
            rec.transitions.append((ABORTED, now))
            self._finished += 1
            self._event("aborted", now, task=task_id, node=None)
            return ABORTED
        rec.pending_abort = True
        self._event("abort_requested", now, task=task_id, node=rec.node_id)
        return "abort_requested"

    # -- queries

    def query(self, task_id: str) -> TaskRecord:
        rec = self.tasks.get(task_id)
        if rec is None:
            raise UnknownTask(task_id)
        return rec

    def stats(self) -> QueueStats:
        return QueueStats(waiting=len(self.queue), running=self._running,
                          finished=self._finished)

    def membership(self) -> list[NodeStatus]:
        return [NodeStatus(descriptor=e.descriptor, free_slots=e.free_slots)
                for e in self.nodes.values()]
