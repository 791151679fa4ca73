"""Control-plane messages between launcher, server and runners.

Every frame is a 4-byte big-endian length followed by the payload.  A payload
starts with the protocol version byte, the message type byte and the sender
name (u16 length + UTF-8), then the message fields in declaration order.
Integers are big-endian and unsigned; particle ids are two u32 (cycle, index);
weights are IEEE-754 doubles.  State vectors never travel on this channel.
"""

from __future__ import annotations

import math
import socket
import struct
import threading
from dataclasses import dataclass, field, fields
from typing import ClassVar, Iterator

from .errors import DecodeError, FrameError, VersionError
from .store import ParticleId

VERSION = 1
MAX_FRAME = 1 << 20
_LEN = struct.Struct(">I")


# field codecs -------------------------------------------------------------

class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, st: struct.Struct) -> tuple:
        end = self.pos + st.size
        if end > len(self.buf):
            raise DecodeError("payload truncated")
        out = st.unpack_from(self.buf, self.pos)
        self.pos = end
        return out

    def raw(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise DecodeError("payload truncated")
        out = self.buf[self.pos:end]
        self.pos = end
        return out


_U8, _U16, _U32, _U64, _F64 = (struct.Struct(f) for f in (">B", ">H", ">I", ">Q", ">d"))
_PID = struct.Struct(">II")


def _enc_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise FrameError("string field longer than 65535 bytes")
    return _U16.pack(len(b)) + b


def _dec_str(r: _Reader) -> str:
    (n,) = r.take(_U16)
    try:
        return r.raw(n).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"invalid UTF-8 in string field: {exc}") from None


def _enc_pids(pids) -> bytes:
    pids = list(pids)
    return _U32.pack(len(pids)) + b"".join(_PID.pack(*p) for p in pids)


def _dec_pids(r: _Reader) -> tuple[ParticleId, ...]:
    (n,) = r.take(_U32)
    if n * _PID.size > len(r.buf) - r.pos:
        raise DecodeError("id list longer than payload")
    return tuple(ParticleId(*r.take(_PID)) for _ in range(n))


def _check_uint(value, bits: int, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value < (1 << bits):
        raise FrameError(f"{name}={value!r} is not a u{bits}")
    return value


def _check_pid(p, name: str) -> ParticleId:
    try:
        c, i = p
    except (TypeError, ValueError):
        raise FrameError(f"{name} is not a particle id: {p!r}") from None
    return ParticleId(_check_uint(c, 32, name), _check_uint(i, 32, name))


# kinds: u32, u64, u8 (bool), f64, str, pid, pids, opt_pid
_ENC = {
    "u8": lambda v: _U8.pack(int(v)),
    "u32": _U32.pack,
    "u64": _U64.pack,
    "f64": _F64.pack,
    "str": _enc_str,
    "pid": lambda p: _PID.pack(*p),
    "pids": _enc_pids,
    "opt_pid": lambda p: b"\x00" if p is None else b"\x01" + _PID.pack(*p),
}


def _dec_field(kind: str, r: _Reader):
    if kind == "u8":
        (v,) = r.take(_U8)
        if v > 1:
            raise DecodeError(f"boolean byte {v} out of range")
        return bool(v)
    if kind == "u32":
        return r.take(_U32)[0]
    if kind == "u64":
        return r.take(_U64)[0]
    if kind == "f64":
        v = r.take(_F64)[0]
        if not math.isfinite(v):
            raise DecodeError("non-finite float")
        return v
    if kind == "str":
        return _dec_str(r)
    if kind == "pid":
        return ParticleId(*r.take(_PID))
    if kind == "pids":
        return _dec_pids(r)
    if kind == "opt_pid":
        (flag,) = r.take(_U8)
        if flag == 0:
            return None
        if flag != 1:
            raise DecodeError(f"optional flag {flag} out of range")
        return ParticleId(*r.take(_PID))
    raise AssertionError(kind)


def _normalize(kind: str, value, name: str):
    if kind == "u8":
        if not isinstance(value, bool):
            raise FrameError(f"{name} must be a bool")
        return value
    if kind in ("u32", "u64"):
        return _check_uint(value, 32 if kind == "u32" else 64, name)
    if kind == "f64":
        value = float(value)
        if not math.isfinite(value):
            raise FrameError(f"{name} must be finite")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise FrameError(f"{name} must be a string")
        return value
    if kind == "pid":
        return _check_pid(value, name)
    if kind == "pids":
        return tuple(_check_pid(p, name) for p in value)
    if kind == "opt_pid":
        return None if value is None else _check_pid(value, name)
    raise AssertionError(kind)


# messages -----------------------------------------------------------------

@dataclass(frozen=True)
class Message:
    """Base for all messages; ``sender`` names the originating process."""

    TYPE: ClassVar[int] = 0
    LAYOUT: ClassVar[tuple[tuple[str, str], ...]] = ()

    sender: str = field(default="", kw_only=True)

    def __post_init__(self):
        for name, kind in self.LAYOUT:
            object.__setattr__(self, name, _normalize(kind, getattr(self, name), name))
        object.__setattr__(self, "sender", _normalize("str", self.sender, "sender"))


@dataclass(frozen=True)
class Join(Message):
    TYPE = 1
    LAYOUT = (("runner_id", "u32"), ("cache_capacity", "u32"))
    runner_id: int
    cache_capacity: int


@dataclass(frozen=True)
class RequestWork(Message):
    TYPE = 2
    LAYOUT = (("runner_id", "u32"),)
    runner_id: int


@dataclass(frozen=True)
class Weight(Message):
    """A staged child's weight; doubles as the request for more work."""

    TYPE = 3
    LAYOUT = (("runner_id", "u32"), ("child", "pid"), ("weight", "f64"),
              ("added", "pids"), ("removed", "pids"))
    runner_id: int
    child: ParticleId
    weight: float
    added: tuple = ()
    removed: tuple = ()


@dataclass(frozen=True)
class Assign(Message):
    TYPE = 4
    LAYOUT = (("task_index", "u32"), ("parent", "pid"), ("child", "pid"),
              ("perturb_seed", "u64"), ("siblings", "u32"))
    task_index: int
    parent: ParticleId
    child: ParticleId
    perturb_seed: int
    siblings: int = 1


@dataclass(frozen=True)
class PrefetchHint(Message):
    TYPE = 5
    LAYOUT = (("parent", "pid"),)
    parent: ParticleId


@dataclass(frozen=True)
class CancelPrefetch(Message):
    """Withdraw the queued assignment of ``parent`` and any prefetch for it."""

    TYPE = 6
    LAYOUT = (("parent", "pid"),)
    parent: ParticleId


@dataclass(frozen=True)
class EvictDirective(Message):
    """Evict ``id``; ``None`` grants a transient overflow instead."""

    TYPE = 7
    LAYOUT = (("id", "opt_pid"),)
    id: ParticleId | None


@dataclass(frozen=True)
class EvictRequest(Message):
    TYPE = 8
    LAYOUT = (("runner_id", "u32"), ("added", "pids"), ("removed", "pids"))
    runner_id: int
    added: tuple = ()
    removed: tuple = ()


@dataclass(frozen=True)
class CycleExhausted(Message):
    TYPE = 9
    LAYOUT = (("cycle", "u32"),)
    cycle: int = 0


@dataclass(frozen=True)
class Heartbeat(Message):
    TYPE = 10
    LAYOUT = (("sequence", "u64"),)
    sequence: int


@dataclass(frozen=True)
class Shutdown(Message):
    TYPE = 11
    LAYOUT = (("reason", "str"),)
    reason: str = ""


@dataclass(frozen=True)
class CheckpointAck(Message):
    TYPE = 12
    LAYOUT = (("cycle", "u32"), ("completed", "u32"))
    cycle: int
    completed: int = 0


@dataclass(frozen=True)
class CancelAck(Message):
    """Runner's answer to CANCEL_PREFETCH; ``revoked`` is false if work had started."""

    TYPE = 13
    LAYOUT = (("runner_id", "u32"), ("parent", "pid"), ("revoked", "u8"))
    runner_id: int
    parent: ParticleId
    revoked: bool


@dataclass(frozen=True)
class KillRunner(Message):
    TYPE = 14
    LAYOUT = (("runner_id", "u32"),)
    runner_id: int


@dataclass(frozen=True)
class RetireRunner(Message):
    TYPE = 15
    LAYOUT = (("runner_id", "u32"),)
    runner_id: int


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.TYPE: cls for cls in (Join, RequestWork, Weight, Assign, PrefetchHint, CancelPrefetch,
                              EvictDirective, EvictRequest, CycleExhausted, Heartbeat, Shutdown,
                              CheckpointAck, CancelAck, KillRunner, RetireRunner)
}


def encode(msg: Message) -> bytes:
    """Payload bytes for ``msg`` (without the length prefix)."""
    parts = [bytes((VERSION, msg.TYPE)), _enc_str(msg.sender)]
    for name, kind in msg.LAYOUT:
        parts.append(_ENC[kind](getattr(msg, name)))
    payload = b"".join(parts)
    if len(payload) > MAX_FRAME:
        raise FrameError(f"payload of {len(payload)} bytes exceeds {MAX_FRAME}")
    return payload


def decode(payload: bytes) -> Message:
    """Inverse of :func:`encode`; malformed input raises a typed protocol error."""
    if len(payload) > MAX_FRAME:
        raise FrameError(f"payload of {len(payload)} bytes exceeds {MAX_FRAME}")
    if len(payload) < 2:
        raise DecodeError("payload shorter than header")
    version, mtype = payload[0], payload[1]
    if version != VERSION:
        raise VersionError(f"protocol version {version}, expected {VERSION}")
    cls = MESSAGE_TYPES.get(mtype)
    if cls is None:
        raise DecodeError(f"unknown message type {mtype}")
    r = _Reader(payload, 2)
    sender = _dec_str(r)
    values = {name: _dec_field(kind, r) for name, kind in cls.LAYOUT}
    if r.pos != len(payload):
        raise DecodeError(f"{len(payload) - r.pos} trailing bytes after {cls.__name__}")
    return cls(**values, sender=sender)


def frame(msg: Message) -> bytes:
    payload = encode(msg)
    return _LEN.pack(len(payload)) + payload


class FrameBuffer:
    """Incremental splitter of a byte stream into payloads."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[bytes]:
        self._buf += data
        while len(self._buf) >= 4:
            (n,) = _LEN.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise FrameError(f"frame length {n} exceeds {MAX_FRAME}")
            if len(self._buf) < 4 + n:
                break
            payload = bytes(self._buf[4:4 + n])
            del self._buf[:4 + n]
            yield payload

    @property
    def pending(self) -> int:
        return len(self._buf)


def message_fields(msg: Message) -> dict:
    return {f.name: getattr(msg, f.name) for f in fields(msg)}


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {address!r}")
    return host, int(port)


class Connection:
    """Blocking message stream over a connected socket; sends are thread-safe."""

    def __init__(self, sock: socket.socket, name: str = ""):
        self.sock = sock
        self.name = name
        self._frames = FrameBuffer()
        self._ready: list[bytes] = []
        self._lock = threading.Lock()

    @classmethod
    def connect(cls, address: str, name: str = "", timeout: float = 10.0) -> "Connection":
        sock = socket.create_connection(parse_address(address), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        return cls(sock, name)

    def send(self, msg: Message) -> None:
        if not msg.sender and self.name:
            msg = type(msg)(**{k: v for k, v in message_fields(msg).items() if k != "sender"},
                            sender=self.name)
        data = frame(msg)
        with self._lock:
            self.sock.sendall(data)

    def send_raw(self, data: bytes) -> None:
        with self._lock:
            self.sock.sendall(data)

    def recv(self, timeout: float | None = None) -> Message | None:
        """Next message; ``None`` on orderly EOF.  Raises ``TimeoutError``."""
        self.sock.settimeout(timeout)
        try:
            while not self._ready:
                data = self.sock.recv(65536)
                if not data:
                    if self._frames.pending:
                        raise DecodeError("connection closed inside a frame")
                    return None
                self._ready.extend(self._frames.feed(data))
        except socket.timeout:
            raise TimeoutError("no message within timeout") from None
        finally:
            try:
                self.sock.settimeout(None)
            except OSError:
                pass
        return decode(self._ready.pop(0))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
