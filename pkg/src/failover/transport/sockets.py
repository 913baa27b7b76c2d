"""Real TCP transport for loopback/LAN integration tests.

Same channel surface as the simulated backend, but ``send`` returns a
:class:`concurrent.futures.Future` and ``recv`` blocks the calling thread.
No bandwidth model is enforced; priorities only order what each side writes
next.

Frame layout (network byte order)::

    magic     2s   b"FV"
    version   B    1
    priority  B    Priority value
    flags     B    bit0 LAST chunk, bit1 HAS_TID, bit2 ACK
    pad       3x
    tag       Q
    msg_id    Q
    total     Q    total payload length of the message
    chunk     I    bytes of payload in this frame
    [tid      16s  dp:H pp:H tp:H pad:2x iteration:Q, first frame only if HAS_TID]
    payload   chunk bytes
"""

from __future__ import annotations

import collections
import itertools
import socket
import struct
import threading
import time
from concurrent.futures import Future

from ..domain import TID, Role
from ..errors import Aborted, Interrupted, SetupError
from .base import DEFAULT_CHUNK, Direction, LinkStats, Message, Priority

MAGIC = b"FV"
VERSION = 1
HEADER = struct.Struct("!2sBBB3xQQQI")
TID_BLOCK = struct.Struct("!HHH2xQ")
HELLO = struct.Struct("!2sBxIQ")  # magic, version, endpoint-name length, channel id
F_LAST, F_TID, F_ACK = 1, 2, 4


def encode_tid(tid: TID) -> bytes:
    r = tid.role
    return TID_BLOCK.pack(r.dp_index, r.pp_index, r.tp_index, tid.iteration)


def decode_tid(raw: bytes) -> TID:
    dp, pp, tp, it = TID_BLOCK.unpack(raw)
    return TID(Role(dp, pp, tp), it)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            raise ConnectionError("peer closed")
        buf += part
    return bytes(buf)


class _Side:
    """One end of a TCP channel: a writer thread plus a reader thread."""

    def __init__(self, channel: "SocketChannel", endpoint: str, sock: socket.socket):
        self.channel = channel
        self.endpoint = endpoint
        self.sock = sock
        self.cv = threading.Condition()
        self.queues = {p: collections.deque() for p in Priority}
        self.sending: Priority | None = None
        self.receiving_train = False
        self.inbox: dict[int, collections.deque] = collections.defaultdict(collections.deque)
        self.acks: dict[int, Future] = {}
        self.closed = False
        self.bytes_by_priority = {p: 0 for p in Priority}
        self.busy = 0.0
        self.started = time.monotonic()
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._writer.start()
        self._reader.start()

    def enqueue(self, prio: Priority, frames: list[bytes]) -> None:
        with self.cv:
            self.queues[prio].extend((prio, f) for f in frames)
            self.cv.notify_all()

    def _write_loop(self):
        while True:
            with self.cv:
                while not self.closed and not any(self.queues.values()):
                    self.cv.wait()
                if self.closed:
                    return
                for prio in (Priority.CTRL, Priority.TRAIN, Priority.STATE):
                    if self.queues[prio]:
                        prio, frame = self.queues[prio].popleft()
                        break
                self.sending = prio
            t0 = time.monotonic()
            try:
                self.sock.sendall(frame)
            except OSError:
                self.channel._broken(self)
                return
            with self.cv:
                self.busy += time.monotonic() - t0
                self.bytes_by_priority[prio] += len(frame)
                self.sending = None
                self.cv.notify_all()

    def _read_loop(self):
        partial: dict[int, list] = {}
        try:
            while True:
                head = _read_exact(self.sock, HEADER.size)
                magic, version, prio, flags, tag, msg_id, total, n = HEADER.unpack(head)
                if magic != MAGIC or version != VERSION:
                    raise ConnectionError("bad frame")
                if flags & F_ACK:
                    fut = self.acks.pop(msg_id, None)
                    if fut is not None and not fut.done():
                        fut.set_result(time.monotonic())
                    continue
                tid = None
                if flags & F_TID:
                    tid = decode_tid(_read_exact(self.sock, TID_BLOCK.size))
                body = _read_exact(self.sock, n) if n else b""
                entry = partial.setdefault(msg_id, [prio, tag, tid, bytearray()])
                if tid is not None:
                    entry[2] = tid
                entry[3] += body
                with self.cv:
                    self.receiving_train = prio == Priority.TRAIN and not flags & F_LAST
                if flags & F_LAST:
                    del partial[msg_id]
                    msg = Message(Priority(prio), self.channel.peer(self.endpoint),
                                  self.endpoint, tag, bytes(entry[3]), tid=entry[2])
                    with self.cv:
                        self.inbox[tag].append(msg)
                        self.cv.notify_all()
                    self.channel.net._wake(self.endpoint)
                    ack = HEADER.pack(MAGIC, VERSION, Priority.CTRL, F_ACK, tag, msg_id, 0, 0)
                    self.enqueue(Priority.CTRL, [ack])
        except (OSError, ConnectionError):
            self.channel._broken(self)

    def shutdown(self):
        with self.cv:
            self.closed = True
            self.cv.notify_all()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        for fut in list(self.acks.values()):
            if not fut.done():
                fut.set_exception(Aborted("channel closed mid-transfer"))
        self.acks.clear()


class SocketChannel:
    def __init__(self, net: "SocketNetwork", a: str, b: str, chunk_size: int):
        self.net = net
        self.ends = (a, b)
        self.chunk_size = chunk_size
        self.closed = False
        self.sides: dict[str, _Side] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def peer(self, endpoint: str) -> str:
        a, b = self.ends
        if endpoint == a:
            return b
        if endpoint == b:
            return a
        raise SetupError(f"{endpoint} is not an end of channel {self.ends}")

    def send(self, message: Message) -> Future:
        message.check()
        if message.dest != self.peer(message.source):
            raise SetupError("message does not match channel")
        fut: Future = Future()
        if self.closed:
            fut.set_exception(Aborted("channel closed"))
            return fut
        side = self.sides[message.source]
        payload = bytes(message.payload)
        with self._lock:
            msg_id = next(self._ids)
        side.acks[msg_id] = fut
        frames = []
        total = len(payload)
        n = max(1, -(-total // self.chunk_size))
        for i in range(n):
            body = payload[i * self.chunk_size:(i + 1) * self.chunk_size]
            flags = F_LAST if i == n - 1 else 0
            extra = b""
            if i == 0 and message.tid is not None:
                flags |= F_TID
                extra = encode_tid(message.tid)
            frames.append(HEADER.pack(MAGIC, VERSION, message.priority, flags, message.tag,
                                      msg_id, total, len(body)) + extra + body)
        side.enqueue(message.priority, frames)
        return fut

    def recv(self, endpoint: str, tag: int, timeout: float | None = None) -> Message:
        """Block until a message with ``tag`` arrives or ``endpoint`` is interrupted."""
        side = self.sides[endpoint]
        gen = self.net._interrupt_gen(endpoint)
        deadline = None if timeout is None else time.monotonic() + timeout
        with side.cv:
            while True:
                if side.inbox[tag]:
                    return side.inbox[tag].popleft()
                if self.closed:
                    raise Aborted("channel closed")
                notice = self.net._interrupted_since(endpoint, gen)
                if notice is not None:
                    raise Interrupted(notice[0])
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(f"recv tag={tag} timed out")
                side.cv.wait(0.05 if remaining is None else min(0.05, remaining))

    def _broken(self, side: _Side) -> None:
        if not self.closed:
            self.close()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for side in self.sides.values():
            side.shutdown()
        for end in self.ends:
            self.net._wake(end)


class SocketNetwork:
    """Endpoint registry plus per-endpoint TCP listeners on loopback."""

    def __init__(self, host: str = "127.0.0.1", chunk_size: int = DEFAULT_CHUNK):
        self.host = host
        self.chunk_size = chunk_size
        self._listeners: dict[str, socket.socket] = {}
        self.addresses: dict[str, tuple[str, int]] = {}
        self._pending: dict[int, tuple[threading.Event, list]] = {}
        self._channels: list[SocketChannel] = []
        self._interrupts: dict[str, list] = collections.defaultdict(list)
        self._lock = threading.Lock()
        self._ids = itertools.count(1)

    def register(self, endpoint: str, node: str | None = None) -> tuple[str, int]:
        srv = socket.create_server((self.host, 0))
        self._listeners[endpoint] = srv
        self.addresses[endpoint] = srv.getsockname()[:2]
        threading.Thread(target=self._accept_loop, args=(srv,), daemon=True).start()
        return self.addresses[endpoint]

    def _accept_loop(self, srv: socket.socket):
        while True:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            try:
                magic, version, _, cid = HELLO.unpack(_read_exact(conn, HELLO.size))
                if magic != MAGIC or version != VERSION:
                    conn.close()
                    continue
            except (OSError, ConnectionError):
                continue
            with self._lock:
                waiter = self._pending.get(cid)
            if waiter is None:
                conn.close()
                continue
            waiter[1].append(conn)
            waiter[0].set()

    def open_channel(self, a: str, b: str, link=None, timeout: float = 5.0) -> SocketChannel:
        if a not in self.addresses or b not in self.addresses:
            raise SetupError(f"unknown endpoint among {a!r}, {b!r}")
        chunk = getattr(link, "chunk_size", self.chunk_size)
        ch = SocketChannel(self, a, b, chunk)
        cid = next(self._ids)
        done = threading.Event()
        with self._lock:
            self._pending[cid] = (done, [])
        sock_a = socket.create_connection(self.addresses[b], timeout=timeout)
        sock_a.settimeout(None)
        sock_a.sendall(HELLO.pack(MAGIC, VERSION, 0, cid))
        if not done.wait(timeout):
            raise SetupError(f"peer {b} did not accept")
        with self._lock:
            sock_b = self._pending.pop(cid)[1][0]
        for s in (sock_a, sock_b):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        ch.sides[a] = _Side(ch, a, sock_a)
        ch.sides[b] = _Side(ch, b, sock_b)
        self._channels.append(ch)
        return ch

    def interrupt(self, endpoint: str, notice: object = None) -> None:
        with self._lock:
            self._interrupts[endpoint].append(notice)
        self._wake(endpoint)

    def _interrupt_gen(self, endpoint: str) -> int:
        with self._lock:
            return len(self._interrupts[endpoint])

    def _interrupted_since(self, endpoint: str, gen: int):
        with self._lock:
            notices = self._interrupts[endpoint]
            return (notices[-1],) if len(notices) > gen else None

    def _wake(self, endpoint: str) -> None:
        for ch in list(self._channels):
            side = ch.sides.get(endpoint)
            if side is not None:
                with side.cv:
                    side.cv.notify_all()

    def link_idle(self, endpoint: str, direction: Direction | str) -> bool:
        direction = Direction(direction)
        for ch in self._channels:
            side = ch.sides.get(endpoint)
            if side is None or ch.closed:
                continue
            with side.cv:
                if direction == Direction.UP and (
                        side.queues[Priority.TRAIN] or side.sending == Priority.TRAIN):
                    return False
                if direction == Direction.DOWN and side.receiving_train:
                    return False
        return True

    def stats(self, endpoint: str) -> LinkStats:
        total = LinkStats()
        for ch in self._channels:
            side = ch.sides.get(endpoint)
            if side is None:
                continue
            total.busy_time += side.busy
            for p, n in side.bytes_by_priority.items():
                total.bytes_by_priority[p] += n
            total.idle_time = max(total.idle_time, time.monotonic() - side.started)
        total.idle_time = max(0.0, total.idle_time - total.busy_time)
        return total

    def close(self) -> None:
        for ch in list(self._channels):
            ch.close()
        for srv in self._listeners.values():
            srv.close()
