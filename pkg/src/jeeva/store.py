"""Durable request/user store behind the portal and the task client.

Persistence is a single append-only journal of newline-delimited canonical
JSON upserts, replayed over a periodic snapshot. Every mutation is
fsynced before it is acknowledged, so state survives kill -9 at any
point. Cross-process atomicity (the portal and the task client share one
store directory) comes from an exclusive flock around every operation;
replay is idempotent because journal entries carry full records keyed by
id.
"""

from __future__ import annotations

import fcntl
import json
import os
import threading
import time
from dataclasses import dataclass, replace

from .core import PredictionResult, ProteinSequence, StructureString, render_result

PENDING = "pending"
DISPATCHED = "dispatched"
COMPLETED = "completed"
FAILED = "failed"
REQUEST_TERMINAL = frozenset({COMPLETED, FAILED})

ANONYMOUS_RETENTION_DAYS = 30

ROLE_USER = "user"
ROLE_ADMIN = "admin"

_COMPACT_THRESHOLD_LINES = 2000


class StoreError(Exception):
    pass


class UnknownRequest(StoreError):
    pass


class BadTransition(StoreError):
    pass


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    name: str
    email: str
    password_hash: str
    salt: str
    role: str = ROLE_USER
    created_at: float = 0.0

    def to_obj(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_obj(cls, obj: dict) -> "UserRecord":
        return cls(**obj)

    def public_obj(self) -> dict:
        # password material never leaves the store
        return {"user_id": self.user_id, "name": self.name, "email": self.email,
                "role": self.role, "created_at": self.created_at}


@dataclass(frozen=True)
class RequestRecord:
    request_id: str
    owner: str = ""            # registered user_id, or "" for anonymous
    anon_token: str = ""       # retrieval token for anonymous submitters
    header: str = ""
    sequence: str = ""
    notify_email: str = ""
    state: str = PENDING
    submitted_at: float = 0.0
    completed_at: float = 0.0
    result: dict | None = None
    failure_reason: str = ""

    def to_obj(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_obj(cls, obj: dict) -> "RequestRecord":
        return cls(**obj)

    def prediction_result(self) -> PredictionResult | None:
        if self.result is None:
            return None
        return PredictionResult(
            job_id=self.request_id,
            sequence=ProteinSequence(id=self.header, residues=self.result["residues"]),
            structure=StructureString(self.result["structure"]),
            confidence=tuple(float(v) for v in self.result["confidence"]),
        )


def result_obj(result: PredictionResult) -> dict:
    return {"residues": result.sequence.residues,
            "structure": result.structure.labels,
            "confidence": list(result.confidence)}


class Store:
    """File-backed store rooted at a directory.

    One Store instance may be shared by threads; several processes may each
    open their own instance on the same directory.
    """

    def __init__(self, root: str, outbox_dir: str | None = None,
                 compact: bool = False,
                 anonymous_retention_days: float = ANONYMOUS_RETENTION_DAYS):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.journal_path = os.path.join(root, "journal.ndjson")
        self.snapshot_path = os.path.join(root, "snapshot.json")
        self.lock_path = os.path.join(root, "store.lock")
        self.logs_dir = os.path.join(root, "logs")
        self.outbox_dir = outbox_dir or os.path.join(root, "outbox")
        os.makedirs(self.logs_dir, exist_ok=True)
        os.makedirs(self.outbox_dir, exist_ok=True)
        self.retention_s = anonymous_retention_days * 86400.0
        self._users: dict[str, UserRecord] = {}
        self._requests: dict[str, RequestRecord] = {}
        self._pos = 0
        self._mutex = threading.RLock()
        self._lock_fh = open(self.lock_path, "a+b")
        with self._locked():
            if compact:
                self._compact()

    # -- locking / replay

    def _locked(self):
        return _StoreLock(self)

    def _reload_all(self) -> None:
        self._users.clear()
        self._requests.clear()
        if os.path.exists(self.snapshot_path):
            with open(self.snapshot_path) as fh:
                snap = json.load(fh)
            for obj in snap.get("users", {}).values():
                self._users[obj["user_id"]] = UserRecord.from_obj(obj)
            for obj in snap.get("requests", {}).values():
                self._requests[obj["request_id"]] = RequestRecord.from_obj(obj)
        self._pos = 0
        self._catch_up()

    def _catch_up(self) -> None:
        """Apply journal lines written since our last read position."""
        if not os.path.exists(self.journal_path):
            self._pos = 0
            return
        size = os.path.getsize(self.journal_path)
        if size < self._pos:
            # journal was compacted by another process; replay from scratch
            self._reload_all()
            return
        if size == self._pos:
            return
        with open(self.journal_path, "rb") as fh:
            fh.seek(self._pos)
            for raw in fh:
                if not raw.endswith(b"\n"):
                    break  # torn tail write (crash mid-append); ignore
                self._pos += len(raw)
                line = raw.strip()
                if not line:
                    continue
                entry = json.loads(line)
                self._apply(entry)

    def _apply(self, entry: dict) -> None:
        kind, data = entry["kind"], entry["data"]
        if kind == "user":
            self._users[data["user_id"]] = UserRecord.from_obj(data)
        elif kind == "request":
            self._requests[data["request_id"]] = RequestRecord.from_obj(data)
        elif kind == "delete_request":
            self._requests.pop(data["request_id"], None)

    def _append(self, kind: str, data: dict) -> None:
        line = json.dumps({"kind": kind, "data": data},
                          sort_keys=True, separators=(",", ":")) + "\n"
        raw = line.encode("utf-8")
        with open(self.journal_path, "ab") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        self._pos += len(raw)
        self._apply(json.loads(line))

    def _compact(self) -> None:
        self._reload_all()
        snap = {
            "users": {u.user_id: u.to_obj() for u in self._users.values()},
            "requests": {r.request_id: r.to_obj() for r in self._requests.values()},
        }
        tmp = self.snapshot_path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(snap, fh, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.snapshot_path)
        with open(self.journal_path, "wb") as fh:
            fh.flush()
            os.fsync(fh.fileno())
        self._pos = 0

    def maybe_compact(self) -> None:
        with self._locked():
            if not os.path.exists(self.journal_path):
                return
            with open(self.journal_path, "rb") as fh:
                lines = sum(1 for _ in fh)
            if lines >= _COMPACT_THRESHOLD_LINES:
                self._compact()

    # -- users

    def put_user(self, user: UserRecord) -> None:
        with self._locked():
            if any(u.email == user.email and u.user_id != user.user_id
                   for u in self._users.values()):
                raise StoreError(f"email {user.email} already registered")
            self._append("user", user.to_obj())

    def get_user(self, user_id: str) -> UserRecord | None:
        with self._locked():
            return self._users.get(user_id)

    def find_user_by_email(self, email: str) -> UserRecord | None:
        with self._locked():
            for u in self._users.values():
                if u.email == email:
                    return u
            return None

    def list_users(self) -> list[UserRecord]:
        with self._locked():
            return sorted(self._users.values(), key=lambda u: u.created_at)

    # -- requests

    def add_request(self, record: RequestRecord) -> None:
        with self._locked():
            if record.request_id in self._requests:
                raise StoreError(f"duplicate request {record.request_id}")
            self._append("request", record.to_obj())

    def get_request(self, request_id: str) -> RequestRecord | None:
        with self._locked():
            return self._requests.get(request_id)

    def requests_for(self, owner: str) -> list[RequestRecord]:
        with self._locked():
            mine = [r for r in self._requests.values() if r.owner == owner]
            return sorted(mine, key=lambda r: (-r.submitted_at, r.request_id))

    def all_requests(self) -> list[RequestRecord]:
        with self._locked():
            return sorted(self._requests.values(),
                          key=lambda r: (-r.submitted_at, r.request_id))

    def delete_request(self, request_id: str) -> None:
        with self._locked():
            if request_id not in self._requests:
                raise UnknownRequest(request_id)
            self._append("delete_request", {"request_id": request_id})

    def claim_pending(self, limit: int | None = None) -> list[RequestRecord]:
        """Atomically move pending requests to dispatched and return them.

        The exclusive file lock makes concurrent pollers of the same store
        claim disjoint sets.
        """
        claimed: list[RequestRecord] = []
        with self._locked():
            pending = [r for r in self._requests.values() if r.state == PENDING]
            pending.sort(key=lambda r: (r.submitted_at, r.request_id))
            if limit is not None:
                pending = pending[:limit]
            for rec in pending:
                updated = replace(rec, state=DISPATCHED)
                self._append("request", updated.to_obj())
                claimed.append(updated)
        return claimed

    def _transition(self, request_id: str, from_states: frozenset[str],
                    **changes) -> RequestRecord:
        rec = self._requests.get(request_id)
        if rec is None:
            raise UnknownRequest(request_id)
        if rec.state not in from_states:
            raise BadTransition(f"{request_id} is {rec.state}")
        updated = replace(rec, **changes)
        self._append("request", updated.to_obj())
        return updated

    def complete_request(self, request_id: str, result: PredictionResult) -> None:
        with self._locked():
            rec = self._requests.get(request_id)
            if rec is not None and rec.state == COMPLETED:
                return  # idempotent re-delivery after a crash
            self._transition(request_id, frozenset({DISPATCHED}), state=COMPLETED,
                             completed_at=time.time(), result=result_obj(result))

    def fail_request(self, request_id: str, reason: str) -> None:
        with self._locked():
            rec = self._requests.get(request_id)
            if rec is not None and rec.state == FAILED:
                return
            self._transition(request_id, frozenset({DISPATCHED}), state=FAILED,
                             completed_at=time.time(), failure_reason=reason)

    def release_request(self, request_id: str) -> None:
        """Dispatched back to pending, for scheduler-unreachable re-dispatch."""
        with self._locked():
            self._transition(request_id, frozenset({DISPATCHED}), state=PENDING)

    def terminal_requests(self) -> list[RequestRecord]:
        with self._locked():
            return [r for r in self._requests.values() if r.state in REQUEST_TERMINAL]

    def purge_expired_anonymous(self, now: float | None = None) -> int:
        now = time.time() if now is None else now
        purged = 0
        with self._locked():
            for rec in list(self._requests.values()):
                if (rec.owner == "" and rec.state in REQUEST_TERMINAL
                        and rec.completed_at
                        and now - rec.completed_at > self.retention_s):
                    self._append("delete_request", {"request_id": rec.request_id})
                    purged += 1
        return purged

    # -- per-task logs and outbox

    def task_log_path(self, job_id: str) -> str:
        return os.path.join(self.logs_dir, f"{job_id}.log")

    def append_task_log(self, job_id: str, line: str) -> None:
        with open(self.task_log_path(job_id), "a") as fh:
            fh.write(line.rstrip("\n") + "\n")

    def read_task_log(self, job_id: str) -> str:
        path = self.task_log_path(job_id)
        if not os.path.exists(path):
            return ""
        with open(path) as fh:
            return fh.read()

    def outbox_path(self, job_id: str) -> str:
        return os.path.join(self.outbox_dir, f"{job_id}.msg")

    def write_outbox(self, job_id: str, recipient: str) -> bool:
        """Write the notification file for a terminal job. Keyed by job id,
        so re-sending after a crash never duplicates. Returns True if written."""
        path = self.outbox_path(job_id)
        if os.path.exists(path):
            return False
        rec = self.get_request(job_id)
        if rec is None or rec.state not in REQUEST_TERMINAL:
            return False
        if rec.state == COMPLETED:
            subject = f"Prediction {job_id} completed"
            body = render_result(rec.prediction_result())
        else:
            subject = f"Prediction {job_id} failed"
            body = rec.failure_reason
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(f"To: {recipient}\nSubject: {subject}\n\n{body}\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        return True


class _StoreLock:
    """Process-wide mutex + cross-process flock + journal catch-up."""

    def __init__(self, store: Store):
        self.store = store

    def __enter__(self):
        self.store._mutex.acquire()
        fcntl.flock(self.store._lock_fh.fileno(), fcntl.LOCK_EX)
        self.store._catch_up()
        return self.store

    def __exit__(self, *exc):
        fcntl.flock(self.store._lock_fh.fileno(), fcntl.LOCK_UN)
        self.store._mutex.release()
        return False
