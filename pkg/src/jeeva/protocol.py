"""Wire vocabulary and framing shared by scheduler, executors and task clients.

Frame layout: 4-byte big-endian body length, one version byte (0x01), one
message-type byte, then the body as canonical JSON (sorted keys, compact
separators) with binary blobs base64-encoded. Frames are self-delimiting,
so a connection is just a stream of frames.
"""

from __future__ import annotations

import base64
import binascii
import json
import struct
from dataclasses import dataclass, field, fields

PROTOCOL_VERSION = 0x01

# Hard ceiling on a single frame body; the inline-package cap below is the
# configurable application-level limit.
MAX_BODY_BYTES = 128 * 1024 * 1024

DEFAULT_INLINE_CAP = 64 * 1024 * 1024

SCHEDULER_PORT = 9100
PORTAL_PORT = 8080


class ProtocolError(Exception):
    pass


class BadVersion(ProtocolError):
    pass


class BadType(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class MalformedBody(ProtocolError):
    pass


class PayloadTooLarge(ProtocolError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _b64d(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, ValueError, UnicodeEncodeError) as exc:
        raise MalformedBody(f"bad base64 blob: {exc}") from None


def _encode_blobs(blobs: dict[str, bytes]) -> dict[str, str]:
    return {name: _b64e(data) for name, data in blobs.items()}


def _decode_blobs(obj) -> dict[str, bytes]:
    if not isinstance(obj, dict):
        raise MalformedBody("blobs must be an object")
    return {str(name): _b64d(text) for name, text in obj.items()}


# ---------------------------------------------------------------------------
# Task payloads


INLINE = "inline"
DEPENDENCY_REF = "dependency_ref"


@dataclass
class TaskPackage:
    """Either an inline pipeline payload or a pre-deployed dependency request."""

    mode: str
    kind: str | None = None                 # inline: DAG letter A..I
    parameters: dict = field(default_factory=dict)
    blobs: dict[str, bytes] = field(default_factory=dict)
    dependency: tuple[str, str] | None = None   # dependency_ref: (name, version)
    args: tuple[str, ...] = ()
    output_files: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.mode == INLINE:
            if self.kind is None or self.dependency is not None:
                raise ValueError("inline package needs a kind and no dependency")
        elif self.mode == DEPENDENCY_REF:
            if self.dependency is None or self.kind is not None:
                raise ValueError("dependency_ref package needs a dependency and no kind")
        else:
            raise ValueError(f"unknown package mode {self.mode!r}")

    @classmethod
    def inline(cls, kind: str, parameters: dict | None = None,
               blobs: dict[str, bytes] | None = None,
               cap: int = DEFAULT_INLINE_CAP) -> "TaskPackage":
        pkg = cls(mode=INLINE, kind=kind, parameters=parameters or {}, blobs=blobs or {})
        if pkg.payload_size() > cap:
            raise PayloadTooLarge(f"inline payload {pkg.payload_size()} exceeds cap {cap}")
        return pkg

    @classmethod
    def dependency_ref(cls, name: str, version: str, args: list[str] | tuple[str, ...] = (),
                       blobs: dict[str, bytes] | None = None,
                       output_files: list[str] | tuple[str, ...] = ()) -> "TaskPackage":
        return cls(mode=DEPENDENCY_REF, dependency=(name, version), args=tuple(args),
                   blobs=blobs or {}, output_files=tuple(output_files))

    def payload_size(self) -> int:
        return sum(len(b) for b in self.blobs.values())

    def to_obj(self) -> dict:
        obj = {"mode": self.mode, "blobs": _encode_blobs(self.blobs)}
        if self.mode == INLINE:
            obj["kind"] = self.kind
            obj["parameters"] = self.parameters
        else:
            obj["name"], obj["version"] = self.dependency
            obj["args"] = list(self.args)
            obj["output_files"] = list(self.output_files)
        return obj

    @classmethod
    def from_obj(cls, obj) -> "TaskPackage":
        if not isinstance(obj, dict):
            raise MalformedBody("package must be an object")
        mode = obj.get("mode")
        blobs = _decode_blobs(obj.get("blobs", {}))
        try:
            if mode == INLINE:
                return cls(mode=INLINE, kind=str(obj["kind"]),
                           parameters=dict(obj.get("parameters", {})), blobs=blobs)
            if mode == DEPENDENCY_REF:
                return cls(mode=DEPENDENCY_REF,
                           dependency=(str(obj["name"]), str(obj["version"])),
                           args=tuple(str(a) for a in obj.get("args", [])),
                           blobs=blobs,
                           output_files=tuple(str(f) for f in obj.get("output_files", [])))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedBody(f"bad package: {exc}") from None
        raise MalformedBody(f"unknown package mode {mode!r}")


@dataclass(frozen=True)
class NodeDescriptor:
    """One executor's membership record."""

    node_id: str
    address: str
    slot_count: int
    joined_at: float = 0.0

    def __post_init__(self) -> None:
        if self.slot_count < 1:
            raise ValueError("slot_count must be >= 1")

    def to_obj(self) -> dict:
        return {"node_id": self.node_id, "address": self.address,
                "slot_count": self.slot_count, "joined_at": self.joined_at}

    @classmethod
    def from_obj(cls, obj) -> "NodeDescriptor":
        try:
            return cls(node_id=str(obj["node_id"]), address=str(obj["address"]),
                       slot_count=int(obj["slot_count"]), joined_at=float(obj["joined_at"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedBody(f"bad node descriptor: {exc}") from None


@dataclass(frozen=True)
class NodeStatus:
    """Descriptor plus live slot usage, as reported by membership queries."""

    descriptor: NodeDescriptor
    free_slots: int

    def to_obj(self) -> dict:
        obj = self.descriptor.to_obj()
        obj["free_slots"] = self.free_slots
        return obj

    @classmethod
    def from_obj(cls, obj) -> "NodeStatus":
        try:
            free = int(obj["free_slots"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedBody(f"bad node status: {exc}") from None
        return cls(descriptor=NodeDescriptor.from_obj(obj), free_slots=free)


# ---------------------------------------------------------------------------
# Messages


@dataclass
class SubmitTask:
    task_id: str
    job_id: str
    package: TaskPackage
    token: str = ""


@dataclass
class SubmitAck:
    task_id: str


@dataclass
class QueryTask:
    task_id: str


@dataclass
class TaskStatus:
    task_id: str
    state: str
    detail: str = ""
    retry_count: int = 0
    outputs: dict[str, bytes] = field(default_factory=dict)


@dataclass
class AbortTask:
    task_id: str


@dataclass
class AssignTask:
    task_id: str
    package: TaskPackage


@dataclass
class TaskResult:
    """Outcome of one assignment: exactly one of outputs / error is set."""

    task_id: str
    outputs: dict[str, bytes] | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if (self.outputs is None) == (self.error is None):
            raise ValueError("exactly one of outputs/error must be set")

    @property
    def ok(self) -> bool:
        return self.outputs is not None


@dataclass
class Register:
    descriptor: NodeDescriptor
    token: str = ""


@dataclass
class Heartbeat:
    node_id: str
    running: tuple[str, ...] = ()


@dataclass
class MembershipQuery:
    pass


@dataclass
class MembershipReply:
    nodes: tuple[NodeStatus, ...] = ()


@dataclass
class StatsQuery:
    pass


@dataclass
class StatsReply:
    waiting: int
    running: int
    finished: int


@dataclass
class Error:
    code: str
    detail: str = ""
    ref: str = ""


Message = (
    SubmitTask | SubmitAck | QueryTask | TaskStatus | AbortTask | AssignTask
    | TaskResult | Register | Heartbeat | MembershipQuery | MembershipReply
    | StatsQuery | StatsReply | Error
)

_TYPE_BYTES: dict[type, int] = {
    SubmitTask: 1, SubmitAck: 2, QueryTask: 3, TaskStatus: 4, AbortTask: 5,
    AssignTask: 6, TaskResult: 7, Register: 8, Heartbeat: 9, MembershipQuery: 10,
    MembershipReply: 11, StatsQuery: 12, StatsReply: 13, Error: 14,
}
_TYPES_BY_BYTE = {v: k for k, v in _TYPE_BYTES.items()}


def _to_body(msg: Message) -> dict:
    body: dict = {}
    for f in fields(msg):
        value = getattr(msg, f.name)
        if isinstance(value, TaskPackage):
            body[f.name] = value.to_obj()
        elif isinstance(value, NodeDescriptor):
            body[f.name] = value.to_obj()
        elif isinstance(msg, MembershipReply) and f.name == "nodes":
            body[f.name] = [n.to_obj() for n in value]
        elif f.name == "outputs":
            body[f.name] = None if value is None else _encode_blobs(value)
        elif isinstance(value, tuple):
            body[f.name] = list(value)
        else:
            body[f.name] = value
    return body


def _from_body(cls: type, body: dict) -> Message:
    if not isinstance(body, dict):
        raise MalformedBody("body must be a JSON object")
    kwargs: dict = {}
    try:
        for f in fields(cls):
            if f.name not in body:
                raise MalformedBody(f"missing field {f.name!r}")
            value = body[f.name]
            if f.name == "package":
                kwargs[f.name] = TaskPackage.from_obj(value)
            elif f.name == "descriptor":
                kwargs[f.name] = NodeDescriptor.from_obj(value)
            elif cls is MembershipReply and f.name == "nodes":
                kwargs[f.name] = tuple(NodeStatus.from_obj(n) for n in value)
            elif f.name == "outputs":
                kwargs[f.name] = None if value is None else _decode_blobs(value)
            elif cls is Heartbeat and f.name == "running":
                kwargs[f.name] = tuple(str(t) for t in value)
            elif f.type in ("int", int):
                kwargs[f.name] = int(value)
            elif f.type in ("float", float):
                kwargs[f.name] = float(value)
            else:
                kwargs[f.name] = value
        extra = set(body) - {f.name for f in fields(cls)}
        if extra:
            raise MalformedBody(f"unknown fields {sorted(extra)}")
        return cls(**kwargs)
    except MalformedBody:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise MalformedBody(f"bad {cls.__name__} body: {exc}") from None


def encode(msg: Message) -> bytes:
    """Encode one message into a single frame."""
    type_byte = _TYPE_BYTES.get(type(msg))
    if type_byte is None:
        raise BadType(f"not a protocol message: {type(msg).__name__}")
    body = canonical_json(_to_body(msg))
    if len(body) > MAX_BODY_BYTES:
        raise PayloadTooLarge(f"body of {len(body)} bytes exceeds frame limit")
    return struct.pack(">I", len(body)) + bytes([PROTOCOL_VERSION, type_byte]) + body


def _decode_one(data: bytes, offset: int) -> tuple[Message, int]:
    if len(data) - offset < 4:
        raise TruncatedFrame("frame shorter than length prefix")
    (body_len,) = struct.unpack_from(">I", data, offset)
    if body_len > MAX_BODY_BYTES:
        raise PayloadTooLarge(f"declared body of {body_len} bytes exceeds frame limit")
    end = offset + 6 + body_len
    if len(data) - offset < 6:
        raise TruncatedFrame("frame cut inside header")
    version = data[offset + 4]
    if version != PROTOCOL_VERSION:
        raise BadVersion(f"unsupported protocol version {version:#04x}")
    type_byte = data[offset + 5]
    cls = _TYPES_BY_BYTE.get(type_byte)
    if cls is None:
        raise BadType(f"unknown message type byte {type_byte:#04x}")
    if len(data) < end:
        raise TruncatedFrame(f"body truncated: need {body_len} bytes")
    raw = data[offset + 6:end]
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedBody(f"body is not valid JSON: {exc}") from None
    return _from_body(cls, body), end


def decode(data: bytes) -> Message:
    """Decode exactly one frame; trailing bytes are an error."""
    msg, end = _decode_one(data, 0)
    if end != len(data):
        raise MalformedBody(f"{len(data) - end} trailing bytes after frame")
    return msg


def decode_all(data: bytes) -> list[Message]:
    """Decode a concatenation of frames, in order."""
    offset = 0
    out = []
    while offset < len(data):
        msg, offset = _decode_one(data, offset)
        out.append(msg)
    return out


class FrameReader:
    """Incremental frame reader for a byte stream."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < 6:
                break
            (body_len,) = struct.unpack_from(">I", self._buf, 0)
            if body_len > MAX_BODY_BYTES:
                raise PayloadTooLarge(f"declared body of {body_len} bytes exceeds frame limit")
            total = 6 + body_len
            if len(self._buf) < total:
                break
            frame = bytes(self._buf[:total])
            del self._buf[:total]
            out.append(decode(frame))
        return out

    def pending(self) -> int:
        return len(self._buf)


def read_frame(sock) -> Message | None:
    """Blocking read of one frame from a socket; None on clean EOF."""
    header = _read_exact(sock, 6)
    if header is None:
        return None
    (body_len,) = struct.unpack(">I", header[:4])
    if body_len > MAX_BODY_BYTES:
        raise PayloadTooLarge(f"declared body of {body_len} bytes exceeds frame limit")
    body = _read_exact(sock, body_len) if body_len else b""
    if body is None:
        raise TruncatedFrame("connection closed mid-frame")
    return decode(header + body)


def _read_exact(sock, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if not buf:
                return None
            raise TruncatedFrame("connection closed mid-frame")
        buf += chunk
    return buf
