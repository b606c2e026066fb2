"""HTTP portal: submissions, results, accounts, history, admin monitoring.

JSON API over stdlib threading HTTP server. All durable state lives in the
journal-backed Store (acknowledged only after fsync); sessions are
in-memory bearer tokens. Admin endpoints proxy the scheduler's membership
and queue statistics, including a server-push stats stream for the
console's live view. Optionally serves the static console bundle under
/console/.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import mimetypes
import os
import secrets
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .client import GridClient, SchedulerUnreachable
from .core import (
    FastaError,
    IllegalResidue,
    SequenceError,
    confidence_digits,
    parse_fasta,
    render_result,
    validate_sequence,
)
from .store import (
    PENDING,
    ROLE_ADMIN,
    ROLE_USER,
    RequestRecord,
    Store,
    UserRecord,
)

log = logging.getLogger("jeeva.portal")

MAX_BODY_BYTES = 1 * 1024 * 1024
SESSION_TTL_S = 24 * 3600
PBKDF2_ITERATIONS = 60_000
STREAM_INTERVAL_S = 1.0  # stats pushed at least every 2 s


def hash_password(password: str, salt: bytes | None = None) -> tuple[str, str]:
    salt = salt if salt is not None else secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt,
                                 PBKDF2_ITERATIONS)
    return digest.hex(), salt.hex()


def verify_password(password: str, password_hash: str, salt_hex: str) -> bool:
    digest, _ = hash_password(password, bytes.fromhex(salt_hex))
    return hmac.compare_digest(digest, password_hash)


class SessionManager:
    def __init__(self, ttl_s: float = SESSION_TTL_S):
        self.ttl_s = ttl_s
        self._sessions: dict[str, tuple[str, float]] = {}
        self._lock = threading.Lock()

    def create(self, user_id: str) -> str:
        token = secrets.token_urlsafe(32)
        with self._lock:
            self._sessions[token] = (user_id, time.time() + self.ttl_s)
        return token

    def lookup(self, token: str) -> str | None:
        with self._lock:
            entry = self._sessions.get(token)
            if entry is None:
                return None
            user_id, expires = entry
            if time.time() > expires:
                del self._sessions[token]
                return None
            return user_id


class HttpError(Exception):
    def __init__(self, status: int, error: str, **detail):
        self.status = status
        self.payload = {"error": error, **detail}
        super().__init__(error)


class PortalService:
    """Application logic behind the HTTP handler, testable without sockets."""

    def __init__(self, store: Store, scheduler_addr: tuple[str, int] | None = None,
                 grid_token: str = "", console_dir: str | None = None,
                 max_body: int = MAX_BODY_BYTES):
        self.store = store
        self.scheduler_addr = scheduler_addr
        self.grid_token = grid_token
        self.console_dir = console_dir
        self.max_body = max_body
        self.sessions = SessionManager()
        self._stop = threading.Event()

    # -- accounts

    def ensure_admin(self, email: str, password: str, name: str = "admin") -> str:
        existing = self.store.find_user_by_email(email)
        if existing is not None:
            return existing.user_id
        return self.register(name, email, password, role=ROLE_ADMIN)

    def register(self, name: str, email: str, password: str,
                 role: str = ROLE_USER) -> str:
        if not email or not password:
            raise HttpError(400, "BadRequest", detail="email and password required")
        if self.store.find_user_by_email(email) is not None:
            raise HttpError(409, "DuplicateEmail", email=email)
        pw_hash, salt = hash_password(password)
        user = UserRecord(user_id=f"u{secrets.token_hex(8)}", name=name, email=email,
                          password_hash=pw_hash, salt=salt, role=role,
                          created_at=time.time())
        self.store.put_user(user)
        return user.user_id

    def login(self, email: str, password: str) -> dict:
        user = self.store.find_user_by_email(email)
        if user is None or not verify_password(password, user.password_hash, user.salt):
            raise HttpError(401, "BadCredentials")
        token = self.sessions.create(user.user_id)
        return {"token": token, "user_id": user.user_id, "role": user.role}

    def user_for_token(self, token: str) -> UserRecord | None:
        user_id = self.sessions.lookup(token)
        if user_id is None:
            return None
        return self.store.get_user(user_id)

    # -- submissions / results

    def submit_fasta(self, fasta: str, user: UserRecord | None,
                     notify_email: str = "") -> dict:
        try:
            records = parse_fasta(fasta)
        except FastaError as exc:
            raise HttpError(400, "BadFasta", detail=str(exc)) from None
        validated = []
        for idx, (header, raw_seq) in enumerate(records):
            try:
                seq = validate_sequence(raw_seq, seq_id=header)
            except IllegalResidue as exc:
                raise HttpError(400, "IllegalResidue", record=idx, header=header,
                                position=exc.position, char=exc.char) from None
            except SequenceError as exc:
                raise HttpError(400, "BadSequence", record=idx, header=header,
                                detail=str(exc)) from None
            validated.append((header, seq))
        anon_token = "" if user is not None else secrets.token_urlsafe(16)
        ids = []
        for header, seq in validated:
            request_id = f"j{secrets.token_hex(8)}"
            self.store.add_request(RequestRecord(
                request_id=request_id,
                owner=user.user_id if user is not None else "",
                anon_token=anon_token,
                header=header,
                sequence=seq.residues,
                notify_email=notify_email,
                state=PENDING,
                submitted_at=time.time(),
            ))
            ids.append(request_id)
        out = {"request_ids": ids}
        if anon_token:
            out["token"] = anon_token
        return out

    def _authorize_record(self, rec: RequestRecord, user: UserRecord | None,
                          anon_token: str) -> None:
        if user is not None and user.role == ROLE_ADMIN:
            return
        if rec.owner:
            if user is None or user.user_id != rec.owner:
                raise HttpError(403, "Forbidden")
        else:
            if not anon_token or anon_token != rec.anon_token:
                raise HttpError(403, "Forbidden")

    def request_view(self, rec: RequestRecord) -> dict:
        view = {
            "request_id": rec.request_id,
            "state": rec.state,
            "header": rec.header,
            "sequence": rec.sequence,
            "submitted_at": rec.submitted_at,
            "completed_at": rec.completed_at,
            "notify_email": rec.notify_email,
            "log_name": f"{rec.request_id}.log",
        }
        if rec.state == "completed" and rec.result is not None:
            result = rec.prediction_result()
            view["result"] = {
                "structure": result.structure.labels,
                "confidence": list(result.confidence),
                "confidence_digits": confidence_digits(result.confidence),
                "rendering": render_result(result),
            }
        if rec.state == "failed":
            view["failure_reason"] = rec.failure_reason
        return view

    def get_request(self, request_id: str, user: UserRecord | None,
                    anon_token: str) -> dict:
        rec = self.store.get_request(request_id)
        if rec is None:
            raise HttpError(404, "UnknownRequest", request_id=request_id)
        self._authorize_record(rec, user, anon_token)
        return self.request_view(rec)

    def get_task_log(self, request_id: str, user: UserRecord | None,
                     anon_token: str) -> str:
        rec = self.store.get_request(request_id)
        if rec is None:
            raise HttpError(404, "UnknownRequest", request_id=request_id)
        self._authorize_record(rec, user, anon_token)
        return self.store.read_task_log(request_id)

    def history(self, user: UserRecord | None, for_user: str = "") -> list[dict]:
        if user is None:
            raise HttpError(401, "Unauthorized")
        owner = user.user_id
        if for_user and for_user != user.user_id:
            if user.role != ROLE_ADMIN:
                raise HttpError(403, "Forbidden")
            owner = for_user
        return [self.request_view(r) for r in self.store.requests_for(owner)]

    # -- admin

    def _require_admin(self, user: UserRecord | None) -> None:
        if user is None:
            raise HttpError(401, "Unauthorized")
        if user.role != ROLE_ADMIN:
            raise HttpError(403, "Forbidden")

    def _grid(self) -> GridClient:
        if self.scheduler_addr is None:
            raise HttpError(502, "GridUnreachable", detail="no scheduler configured")
        return GridClient(self.scheduler_addr, token=self.grid_token, timeout_s=5.0)

    def admin_nodes(self, user: UserRecord | None) -> list[dict]:
        self._require_admin(user)
        grid = self._grid()
        try:
            reply = grid.membership()
        except SchedulerUnreachable as exc:
            raise HttpError(502, "GridUnreachable", detail=str(exc)) from None
        finally:
            grid.close()
        return [n.to_obj() for n in reply.nodes]

    def admin_stats(self, user: UserRecord | None) -> dict:
        self._require_admin(user)
        return self.fetch_stats()

    def fetch_stats(self) -> dict:
        grid = self._grid()
        try:
            reply = grid.stats()
        except SchedulerUnreachable as exc:
            raise HttpError(502, "GridUnreachable", detail=str(exc)) from None
        finally:
            grid.close()
        return {"waiting": reply.waiting, "running": reply.running,
                "finished": reply.finished}

    def admin_delete_request(self, request_id: str, user: UserRecord | None) -> None:
        self._require_admin(user)
        if self.store.get_request(request_id) is None:
            raise HttpError(404, "UnknownRequest", request_id=request_id)
        self.store.delete_request(request_id)

    def admin_users(self, user: UserRecord | None) -> list[dict]:
        self._require_admin(user)
        return [u.public_obj() for u in self.store.list_users()]


class PortalHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    portal: PortalService = None  # type: ignore[assignment]

    # quiet request logging; keep errors
    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    # -- helpers

    def _json(self, status: int, obj) -> None:
        data = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _text(self, status: int, text: str, content_type: str = "text/plain") -> None:
        data = text.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        if length > self.portal.max_body:
            # drain what the client is still sending so it can read the reply
            remaining = min(length, 8 * self.portal.max_body)
            while remaining > 0:
                chunk = self.rfile.read(min(remaining, 65536))
                if not chunk:
                    break
                remaining -= len(chunk)
            self.close_connection = True
            raise HttpError(413, "PayloadTooLarge", limit=self.portal.max_body)
        return self.rfile.read(length)

    def _user(self):
        auth = self.headers.get("Authorization") or ""
        if auth.startswith("Bearer "):
            return self.portal.user_for_token(auth[len("Bearer "):].strip())
        return None

    def _route(self, method: str) -> None:
        url = urlparse(self.path)
        query = {k: v[0] for k, v in parse_qs(url.query).items()}
        try:
            self._dispatch(method, url.path, query)
        except HttpError as exc:
            self._json(exc.status, exc.payload)
        except (BrokenPipeError, ConnectionResetError):
            pass
        except Exception:
            log.exception("unhandled error for %s %s", method, self.path)
            self._json(500, {"error": "InternalError"})

    def do_GET(self) -> None:
        self._route("GET")

    def do_POST(self) -> None:
        self._route("POST")

    def do_DELETE(self) -> None:
        self._route("DELETE")

    # -- routing

    def _dispatch(self, method: str, path: str, query: dict) -> None:
        portal = self.portal
        user = self._user()
        anon_token = query.get("token", "") or self.headers.get("X-Anon-Token", "")

        if method == "POST" and path == "/api/requests":
            body = self._body()
            ctype = (self.headers.get("Content-Type") or "").split(";")[0].strip()
            if ctype == "application/json":
                try:
                    obj = json.loads(body.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise HttpError(400, "BadJson", detail=str(exc)) from None
                fasta = obj.get("fasta", "")
                notify = obj.get("notify_email", "")
            else:
                fasta = body.decode("utf-8", "replace")
                notify = query.get("notify_email", "")
            self._json(201, portal.submit_fasta(fasta, user, notify_email=notify))
        elif method == "POST" and path == "/api/auth/register":
            obj = self._json_body()
            user_id = portal.register(obj.get("name", ""), obj.get("email", ""),
                                      obj.get("password", ""))
            self._json(201, {"user_id": user_id})
        elif method == "POST" and path == "/api/auth/login":
            obj = self._json_body()
            self._json(200, portal.login(obj.get("email", ""), obj.get("password", "")))
        elif method == "GET" and path == "/api/requests":
            self._json(200, {"requests": portal.history(user, query.get("user", ""))})
        elif method == "GET" and path.startswith("/api/requests/"):
            rest = path[len("/api/requests/"):]
            if rest.endswith("/log"):
                request_id = rest[:-len("/log")]
                self._text(200, portal.get_task_log(request_id, user, anon_token))
            else:
                self._json(200, portal.get_request(rest, user, anon_token))
        elif method == "GET" and path == "/api/admin/nodes":
            self._json(200, {"nodes": portal.admin_nodes(user)})
        elif method == "GET" and path == "/api/admin/stats":
            self._json(200, portal.admin_stats(user))
        elif method == "GET" and path == "/api/admin/stats/stream":
            portal._require_admin(user)
            self._stats_stream()
        elif method == "GET" and path == "/api/admin/users":
            self._json(200, {"users": portal.admin_users(user)})
        elif method == "DELETE" and path.startswith("/api/admin/requests/"):
            request_id = path[len("/api/admin/requests/"):]
            portal.admin_delete_request(request_id, user)
            self._json(200, {"deleted": request_id})
        elif method == "GET" and (path == "/" or path.startswith("/console")):
            self._serve_console(path)
        else:
            raise HttpError(404, "NotFound", path=path)

    def _json_body(self) -> dict:
        body = self._body()
        try:
            obj = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HttpError(400, "BadJson", detail=str(exc)) from None
        if not isinstance(obj, dict):
            raise HttpError(400, "BadJson", detail="expected an object")
        return obj

    # -- server push

    def _stats_stream(self) -> None:
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.end_headers()
        portal = self.portal
        while not portal._stop.is_set():
            try:
                snapshot = portal.fetch_stats()
                snapshot["ts"] = time.time()
            except HttpError as exc:
                snapshot = {"error": exc.payload["error"], "ts": time.time()}
            try:
                self.wfile.write(f"data: {json.dumps(snapshot)}\n\n".encode("utf-8"))
                self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError, OSError):
                return
            portal._stop.wait(STREAM_INTERVAL_S)

    # -- static console

    def _serve_console(self, path: str) -> None:
        root = self.portal.console_dir
        if root is None:
            raise HttpError(404, "NotFound", detail="console not deployed")
        if path in ("/", "/console"):
            self.send_response(302)
            self.send_header("Location", "/console/")
            self.send_header("Content-Length", "0")
            self.end_headers()
            return
        rel = path[len("/console/"):] or "index.html"
        target = os.path.realpath(os.path.join(root, rel))
        if not target.startswith(os.path.realpath(root) + os.sep) \
                and target != os.path.realpath(root):
            raise HttpError(404, "NotFound", path=path)
        if os.path.isdir(target):
            target = os.path.join(target, "index.html")
        if not os.path.exists(target):
            raise HttpError(404, "NotFound", path=path)
        ctype = mimetypes.guess_type(target)[0] or "application/octet-stream"
        with open(target, "rb") as fh:
            data = fh.read()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class PortalServer:
    def __init__(self, service: PortalService, listen: tuple[str, int] = ("127.0.0.1", 0)):
        handler = type("BoundPortalHandler", (PortalHandler,), {"portal": service})
        self.service = service
        self.httpd = ThreadingHTTPServer(listen, handler)
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def start(self) -> "PortalServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever,
                                        kwargs={"poll_interval": 0.1}, daemon=True)
        self._thread.start()
        log.info("portal listening on %s:%d", *self.address)
        return self

    def stop(self) -> None:
        self.service._stop.set()
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
