"""Game-state fan-out over TCP.

Wire protocol (version 1):

* A client connects and sends one ASCII line: ``SUB <topic>\\n`` to subscribe
  or ``STATS\\n`` for a plain-text status report (the server closes after it).
* Every server-to-subscriber message is a frame: 4-byte big-endian payload
  length, then the payload. The first frame after ``SUB`` is ``OK``; from then
  on the subscriber receives every published payload whose leading bytes
  match its topic, in publish order.
* A game-state payload is ``gamestate`` + one space + compact JSON with keys
  ``frame_id, timestamp_us, rods, inference_ms``. ``rods`` lists the 8 rods in
  canonical order as ``{"team", "role", "shift_mm", "rotation_deg"}``. All
  real numbers carry exactly three decimals.

Each subscriber has a bounded queue. When it is full the newest message is
dropped for that subscriber and counted; the publisher never waits.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterator

from foosball_state.core import ROD_IDS, GameState, RodState

log = logging.getLogger(__name__)

TOPIC = "gamestate"
QUEUE_SIZE = 64
_LEN = struct.Struct(">I")
MAX_FRAME = 1 << 20


class MessageError(ValueError):
    """A payload that is not a valid game-state message."""


def _q3(x: float) -> float:
    v = round(float(x), 3)
    return 0.0 if v == 0 else v


@dataclass(frozen=True)
class RodEntry:
    team: str
    role: str
    shift_mm: float
    rotation_deg: float


@dataclass(frozen=True)
class GameStateMessage:
    """Wire record of one frame. Real fields are rounded to 3 decimals on construction."""

    frame_id: int
    timestamp_us: int
    rods: tuple[RodEntry, ...]
    inference_ms: float

    def __post_init__(self):
        if len(self.rods) != len(ROD_IDS):
            raise MessageError(f"expected {len(ROD_IDS)} rods, got {len(self.rods)}")
        fixed = []
        for rid, e in zip(ROD_IDS, self.rods):
            if (e.team, e.role) != (rid.team.value, rid.role.value):
                raise MessageError(f"rod order broken at {e.team}_{e.role}, expected {rid}")
            if not (math.isfinite(e.shift_mm) and math.isfinite(e.rotation_deg)):
                raise MessageError(f"non-finite value for {rid}")
            rot = _q3(e.rotation_deg)
            if rot >= 360.0:
                rot -= 360.0
            fixed.append(RodEntry(e.team, e.role, _q3(e.shift_mm), rot))
        if not math.isfinite(self.inference_ms):
            raise MessageError("non-finite inference_ms")
        object.__setattr__(self, "rods", tuple(fixed))
        object.__setattr__(self, "inference_ms", _q3(self.inference_ms))

    @classmethod
    def from_state(cls, state: GameState, inference_ms: float = 0.0) -> GameStateMessage:
        rods = tuple(RodEntry(rid.team.value, rid.role.value, s.shift, s.rotation)
                     for rid, s in state.ordered())
        return cls(state.frame_id, state.timestamp_us, rods, inference_ms)

    def to_state(self) -> GameState:
        return GameState(self.frame_id, self.timestamp_us,
                         {rid: RodState(e.shift_mm, e.rotation_deg)
                          for rid, e in zip(ROD_IDS, self.rods)})


def encode_message(msg: GameStateMessage) -> bytes:
    rods = ",".join(
        f'{{"team":"{e.team}","role":"{e.role}",'
        f'"shift_mm":{e.shift_mm:.3f},"rotation_deg":{e.rotation_deg:.3f}}}'
        for e in msg.rods)
    body = (f'{{"frame_id":{msg.frame_id},"timestamp_us":{msg.timestamp_us},'
            f'"rods":[{rods}],"inference_ms":{msg.inference_ms:.3f}}}')
    return f"{TOPIC} {body}".encode("ascii")


def _reject_constant(name):
    raise MessageError(f"non-finite number {name} in payload")


def _number(obj, key) -> float:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise MessageError(f"{key} must be a number")
    if not math.isfinite(v):
        raise MessageError(f"{key} is not finite")
    return float(v)


def _integer(obj, key) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise MessageError(f"{key} must be an integer")
    return v


def decode_message(data: bytes) -> GameStateMessage:
    prefix = TOPIC.encode() + b" "
    if not data.startswith(prefix):
        raise MessageError("payload does not start with the gamestate topic")
    try:
        obj = json.loads(data[len(prefix):].decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MessageError(f"malformed JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MessageError("payload is not a JSON object")
    rods = obj.get("rods")
    if not isinstance(rods, list) or len(rods) != len(ROD_IDS):
        raise MessageError(f"rods must be a list of {len(ROD_IDS)} entries")
    entries = []
    for r in rods:
        if not isinstance(r, dict):
            raise MessageError("rod entry is not an object")
        entries.append(RodEntry(str(r.get("team")), str(r.get("role")),
                                _number(r, "shift_mm"), _number(r, "rotation_deg")))
    return GameStateMessage(_integer(obj, "frame_id"), _integer(obj, "timestamp_us"),
                            tuple(entries), _number(obj, "inference_ms"))


# -- framing -------------------------------------------------------------------

def frame(payload: bytes) -> bytes:
    return _LEN.pack(len(payload)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    (n,) = _LEN.unpack(_recv_exact(sock, 4))
    if n > MAX_FRAME:
        raise ConnectionError(f"frame of {n} bytes exceeds limit")
    return _recv_exact(sock, n)


def _read_line(sock: socket.socket, limit: int = 256) -> bytes:
    buf = bytearray()
    while not buf.endswith(b"\n"):
        b = sock.recv(1)
        if not b:
            raise ConnectionError("connection closed during handshake")
        buf += b
        if len(buf) > limit:
            raise ConnectionError("handshake line too long")
    return bytes(buf[:-1])


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


# -- publisher -----------------------------------------------------------------

class _Subscription:
    def __init__(self, sock: socket.socket, topic: bytes, size: int):
        self.sock = sock
        self.topic = topic
        self.queue: queue.Queue = queue.Queue(maxsize=size)
        self.dropped = 0
        self.sent = 0


_STOP = object()


class Publisher:
    """Accepts subscribers on ``endpoint`` and fans out published payloads."""

    def __init__(self, endpoint: str = "127.0.0.1:5556", queue_size: int = QUEUE_SIZE):
        self.endpoint = endpoint
        self.queue_size = queue_size
        self._subs: list[_Subscription] = []
        self._lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._server: socket.socket | None = None
        self._closing = threading.Event()
        self.published = 0
        self.dropped = 0

    def start(self) -> Publisher:
        host, port = parse_endpoint(self.endpoint)
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            srv.bind((host, port))
        except OSError:
            srv.close()
            raise
        srv.listen(16)
        srv.settimeout(0.2)
        self._server = srv
        t = threading.Thread(target=self._accept_loop, name="publisher-accept", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    @property
    def address(self) -> tuple[str, int]:
        return self._server.getsockname()[:2]

    @property
    def bound_endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def __enter__(self):
        return self.start() if self._server is None else self

    def __exit__(self, *exc):
        self.close()

    @property
    def subscriber_count(self) -> int:
        with self._lock:
            return len(self._subs)

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {"subscribers": len(self._subs), "published": self.published,
                    "dropped": self.dropped}

    def publish(self, msg: GameStateMessage | bytes) -> None:
        payload = msg if isinstance(msg, bytes) else encode_message(msg)
        data = frame(payload)
        with self._lock:
            self.published += 1
            subs = list(self._subs)
        for sub in subs:
            if not payload.startswith(sub.topic):
                continue
            try:
                sub.queue.put_nowait(data)
            except queue.Full:
                sub.dropped += 1
                with self._lock:
                    self.dropped += 1

    def _accept_loop(self):
        while not self._closing.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True,
                                 name="publisher-conn")
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket):
        try:
            conn.settimeout(5.0)
            line = _read_line(conn).decode("ascii", "replace").strip()
            if line == "STATS":
                s = self.stats()
                conn.sendall("".join(f"{k} {v}\n" for k, v in s.items()).encode())
                conn.close()
                return
            verb, _, topic = line.partition(" ")
            if verb != "SUB":
                raise ConnectionError(f"bad handshake {line!r}")
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except (OSError, ConnectionError) as exc:
            log.debug("handshake failed: %s", exc)
            conn.close()
            return
        sub = _Subscription(conn, topic.encode(), self.queue_size)
        with self._lock:
            self._subs.append(sub)
        try:
            conn.sendall(frame(b"OK"))
            while True:
                item = sub.queue.get()
                if item is _STOP:
                    break
                conn.sendall(item)
                sub.sent += 1
        except OSError as exc:
            log.info("subscriber dropped: %s", exc)
        finally:
            with self._lock:
                if sub in self._subs:
                    self._subs.remove(sub)
            conn.close()

    def close(self, drain_timeout: float = 1.0) -> None:
        """Stop accepting, let subscribers drain their queues for up to ``drain_timeout`` s."""
        self._closing.set()
        if self._server is not None:
            self._server.close()
        with self._lock:
            subs = list(self._subs)
        for sub in subs:
            try:
                sub.queue.put(_STOP, timeout=drain_timeout)
            except queue.Full:
                sub.sock.close()
        deadline = time.monotonic() + drain_timeout
        for t in self._threads:
            t.join(max(0.0, deadline - time.monotonic()))
        for sub in subs:
            sub.sock.close()


def query_stats(endpoint: str, timeout: float = 2.0) -> dict[str, int]:
    with socket.create_connection(parse_endpoint(endpoint), timeout=timeout) as s:
        s.sendall(b"STATS\n")
        data = b""
        while chunk := s.recv(4096):
            data += chunk
    out = {}
    for line in data.decode().splitlines():
        k, _, v = line.partition(" ")
        out[k] = int(v)
    return out


# -- subscriber ----------------------------------------------------------------

class Subscriber:
    """Client side: iterate decoded messages, reconnecting with backoff on drops.

    Decode failures go to ``on_error`` (default: log a warning) and the stream
    carries on.
    """

    def __init__(self, endpoint: str, topic: str = TOPIC, *, reconnect: bool = True,
                 backoff: tuple[float, float] = (0.05, 2.0), timeout: float | None = None,
                 on_error: Callable[[Exception, bytes], None] | None = None):
        self.endpoint = endpoint
        self.topic = topic
        self.reconnect = reconnect
        self.backoff = backoff
        self.timeout = timeout
        self.on_error = on_error or (lambda exc, raw: log.warning("bad message: %s", exc))
        self._sock: socket.socket | None = None
        self._closed = False

    def connect(self) -> Subscriber:
        sock = socket.create_connection(parse_endpoint(self.endpoint), timeout=5.0)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(f"SUB {self.topic}\n".encode("ascii"))
        if read_frame(sock) != b"OK":
            sock.close()
            raise ConnectionError("publisher refused the subscription")
        sock.settimeout(self.timeout)
        self._sock = sock
        return self

    def __enter__(self):
        return self.connect() if self._sock is None else self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self._closed = True
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def recv_raw(self) -> bytes:
        """Next payload matching the topic. Raises ``ConnectionError`` on drop."""
        prefix = self.topic.encode()
        while True:
            if self._sock is None:
                raise ConnectionError("not connected")
            payload = read_frame(self._sock)
            if payload.startswith(prefix):
                return payload

    def recv(self) -> GameStateMessage:
        return decode_message(self.recv_raw())

    def raw(self) -> Iterator[bytes]:
        delay = self.backoff[0]
        while not self._closed:
            try:
                if self._sock is None:
                    self.connect()
                    delay = self.backoff[0]
                yield self.recv_raw()
            except socket.timeout:
                return
            except (ConnectionError, OSError) as exc:
                if self._closed:
                    return
                if self._sock is not None:
                    self._sock.close()
                    self._sock = None
                if not self.reconnect:
                    return
                log.info("connection lost (%s), retrying in %.2fs", exc, delay)
                time.sleep(delay)
                delay = min(delay * 2, self.backoff[1])

    def __iter__(self) -> Iterator[GameStateMessage]:
        for payload in self.raw():
            try:
                yield decode_message(payload)
            except MessageError as exc:
                self.on_error(exc, payload)


def measure_overhead(n: int = 500, endpoint: str = "127.0.0.1:0") -> float:
    """Median publish-to-decoded latency in ms over loopback, encoding included."""
    rods = tuple(RodEntry(r.team.value, r.role.value, 12.345, 181.5) for r in ROD_IDS)
    samples = []
    with Publisher(endpoint) as pub, Subscriber(pub.bound_endpoint) as sub:
        for i in range(n):
            msg = GameStateMessage(i, i * 16_667, rods, 1.0)
            t0 = time.perf_counter()
            pub.publish(msg)
            got = sub.recv()
            samples.append((time.perf_counter() - t0) * 1e3)
            if got.frame_id != i:
                raise RuntimeError(f"expected frame {i}, received {got.frame_id}")
    samples.sort()
    return samples[len(samples) // 2]
