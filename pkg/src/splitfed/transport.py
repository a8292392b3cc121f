"""In-process and TCP transports with exact per-client traffic accounting.

Both transports move the same encoded frames, and counting happens on
the shared send path, so element counts are identical across backends
by construction. Elements are the primary accounting unit (they map
one-to-one onto the analytic cost formulas); bytes include the frame
overhead and are reported alongside. Auxiliary records (leading "_",
e.g. labels) are tallied separately and excluded from the element
counters.

Each channel endpoint supports one sender and one receiver per
direction concurrently; counters are updated under a lock.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass, field

from . import wire
from .errors import PeerDisconnected, Timeout
from .wire import WireMessage

DEFAULT_TIMEOUT = 120.0


@dataclass
class TrafficCounter:
    """Monotone per-client upload/download tallies with per-round breakdown."""

    up_elements: dict = field(default_factory=lambda: defaultdict(int))
    down_elements: dict = field(default_factory=lambda: defaultdict(int))
    up_aux_elements: dict = field(default_factory=lambda: defaultdict(int))
    down_aux_elements: dict = field(default_factory=lambda: defaultdict(int))
    up_bytes: dict = field(default_factory=lambda: defaultdict(int))
    down_bytes: dict = field(default_factory=lambda: defaultdict(int))
    per_round_up: dict = field(default_factory=lambda: defaultdict(int))
    per_round_down: dict = field(default_factory=lambda: defaultdict(int))
    per_round_up_bytes: dict = field(default_factory=lambda: defaultdict(int))
    per_round_down_bytes: dict = field(default_factory=lambda: defaultdict(int))

    def __post_init__(self):
        self._lock = threading.Lock()

    def record(self, direction: str, client_id: int, rnd: int,
               elements: int, aux_elements: int, nbytes: int) -> None:
        with self._lock:
            if direction == "up":
                self.up_elements[client_id] += elements
                self.up_aux_elements[client_id] += aux_elements
                self.up_bytes[client_id] += nbytes
                self.per_round_up[(client_id, rnd)] += elements
                self.per_round_up_bytes[(client_id, rnd)] += nbytes
            else:
                self.down_elements[client_id] += elements
                self.down_aux_elements[client_id] += aux_elements
                self.down_bytes[client_id] += nbytes
                self.per_round_down[(client_id, rnd)] += elements
                self.per_round_down_bytes[(client_id, rnd)] += nbytes

    def round_elements(self, client_id: int, rnd: int) -> tuple[int, int]:
        with self._lock:
            return (self.per_round_up[(client_id, rnd)],
                    self.per_round_down[(client_id, rnd)])

    def round_bytes(self, client_id: int, rnd: int) -> tuple[int, int]:
        with self._lock:
            return (self.per_round_up_bytes[(client_id, rnd)],
                    self.per_round_down_bytes[(client_id, rnd)])

    def totals(self, client_id: int) -> dict:
        with self._lock:
            return {
                "up_elements": self.up_elements[client_id],
                "down_elements": self.down_elements[client_id],
                "up_bytes": self.up_bytes[client_id],
                "down_bytes": self.down_bytes[client_id],
            }


class TraceLog:
    """Optional per-message trace: (round, type name, client, batch, elements)."""

    def __init__(self):
        self.rows: list[tuple] = []
        self._lock = threading.Lock()

    def add(self, msg: WireMessage) -> None:
        batch = -1
        for name, value in msg.records:
            if name == "_b":
                batch = int(value.reshape(-1)[0])
                break
        with self._lock:
            self.rows.append(
                (msg.round, wire.MSG_NAMES[msg.msg_type], msg.client_id, batch,
                 msg.counted_elements())
            )


class Channel:
    """One endpoint of a duplex client<->server link.

    `side` is "client" or "server"; sends from the client side count as
    that client's uploads, sends from the server side as its downloads.
    Counting and tracing run on the encoded frame, identically for both
    transports.
    """

    def __init__(self, client_id: int, side: str,
                 counter: TrafficCounter | None, trace: TraceLog | None = None):
        self.client_id = client_id
        self.side = side
        self.counter = counter
        self.trace = trace

    def send(self, msg: WireMessage) -> None:
        frame = wire.encode(msg)
        if self.counter is not None and self.client_id != wire.NO_CLIENT:
            direction = "up" if self.side == "client" else "down"
            self.counter.record(direction, self.client_id, msg.round,
                                msg.counted_elements(), msg.aux_elements(), len(frame))
        if self.trace is not None:
            self.trace.add(msg)
        self._send_frame(frame)

    def recv(self, timeout: float | None = DEFAULT_TIMEOUT) -> WireMessage:
        """Next message; timeout=None blocks until the peer closes."""
        return wire.decode(self._recv_frame(timeout))

    def close(self) -> None:
        pass

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, timeout: float) -> bytes:
        raise NotImplementedError


_CLOSED = object()


class InProcChannel(Channel):
    def __init__(self, client_id, side, counter, trace, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__(client_id, side, counter, trace)
        self._inbox = inbox
        self._outbox = outbox

    def _send_frame(self, frame: bytes) -> None:
        self._outbox.put(frame)

    def _recv_frame(self, timeout: float | None) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise Timeout(f"no message within {timeout}s") from None
        if item is _CLOSED:
            raise PeerDisconnected("channel closed")
        return item

    def close(self) -> None:
        self._outbox.put(_CLOSED)


def inproc_pair(client_id: int, counter: TrafficCounter | None,
                trace: TraceLog | None = None) -> tuple[Channel, Channel]:
    """(client endpoint, server endpoint) over a pair of queues."""
    to_server: queue.Queue = queue.Queue()
    to_client: queue.Queue = queue.Queue()
    client_end = InProcChannel(client_id, "client", counter, trace, to_client, to_server)
    server_end = InProcChannel(client_id, "server", counter, trace, to_server, to_client)
    return client_end, server_end


def _recv_exact(sock: socket.socket, n: int, timeout: float | None) -> bytes:
    sock.settimeout(timeout)
    chunks = []
    got = 0
    while got < n:
        try:
            piece = sock.recv(n - got)
        except socket.timeout:
            raise Timeout(f"no bytes within {timeout}s") from None
        except OSError as exc:
            raise PeerDisconnected(str(exc)) from exc
        if not piece:
            raise PeerDisconnected("socket closed mid-frame" if got else "socket closed")
        chunks.append(piece)
        got += len(piece)
    return b"".join(chunks)


class TcpChannel(Channel):
    def __init__(self, client_id, side, counter, trace, sock: socket.socket):
        super().__init__(client_id, side, counter, trace)
        self._sock = sock
        self._send_lock = threading.Lock()

    def _send_frame(self, frame: bytes) -> None:
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise PeerDisconnected(str(exc)) from exc

    def _recv_frame(self, timeout: float | None) -> bytes:
        head = _recv_exact(self._sock, 4, timeout)
        (total,) = struct.unpack(">I", head)
        return head + _recv_exact(self._sock, total, timeout)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    """Accepts one connection per expected client; hello/ack handshake.

    The client opens the socket and sends CONTROL{_hello} carrying its
    id; the listener replies CONTROL{_ack}. Handshake frames carry no
    counted elements.
    """

    def __init__(self, expected_clients: list[int],
                 counter: TrafficCounter | None, trace: TraceLog | None = None):
        self._srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._srv.bind(("127.0.0.1", 0))
        self._srv.listen(len(expected_clients) or 1)
        self.port = self._srv.getsockname()[1]
        self._expected = set(expected_clients)
        self._counter = counter
        self._trace = trace

    def accept_all(self, timeout: float = DEFAULT_TIMEOUT) -> dict[int, Channel]:
        channels: dict[int, Channel] = {}
        self._srv.settimeout(timeout)
        while self._expected:
            try:
                sock, _ = self._srv.accept()
            except socket.timeout:
                raise Timeout("clients did not all connect") from None
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = wire.decode(_recv_frame_raw(sock, timeout))
            client_id = hello.client_id
            chan = TcpChannel(client_id, "server", self._counter, self._trace, sock)
            chan._send_frame(wire.encode(WireMessage(wire.MSG_CONTROL, 0, client_id)))
            channels[client_id] = chan
            self._expected.discard(client_id)
        self._srv.close()
        return channels


def _recv_frame_raw(sock: socket.socket, timeout: float) -> bytes:
    head = _recv_exact(sock, 4, timeout)
    (total,) = struct.unpack(">I", head)
    return head + _recv_exact(sock, total, timeout)


def tcp_connect(port: int, client_id: int, counter: TrafficCounter | None,
                trace: TraceLog | None = None,
                timeout: float = DEFAULT_TIMEOUT) -> Channel:
    sock = socket.create_connection(("127.0.0.1", port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    chan = TcpChannel(client_id, "client", counter, trace, sock)
    chan._send_frame(wire.encode(WireMessage(wire.MSG_CONTROL, 0, client_id)))
    ack = chan.recv(timeout)
    if ack.msg_type != wire.MSG_CONTROL:
        raise PeerDisconnected("bad handshake reply")
    return chan


@dataclass
class Fabric:
    """All channels for one run: per client, a control-plane channel to
    the orchestrator/fed server and (for split protocols) a data-plane
    channel to the main server. Endpoint views are indexed by client id."""

    client_ctl: dict[int, Channel]
    server_ctl: dict[int, Channel]
    client_main: dict[int, Channel]
    server_main: dict[int, Channel]

    def close(self) -> None:
        for group in (self.client_ctl, self.server_ctl, self.client_main, self.server_main):
            for chan in group.values():
                chan.close()


def build_fabric(kind: str, client_ids: list[int], counter: TrafficCounter | None,
                 trace: TraceLog | None = None, with_main: bool = True) -> Fabric:
    """Wire up all parties over the chosen transport ("inproc" or "tcp")."""
    if kind == "inproc":
        client_ctl, server_ctl, client_main, server_main = {}, {}, {}, {}
        for k in client_ids:
            client_ctl[k], server_ctl[k] = inproc_pair(k, counter, trace)
            if with_main:
                client_main[k], server_main[k] = inproc_pair(k, counter, trace)
        return Fabric(client_ctl, server_ctl, client_main, server_main)
    if kind == "tcp":
        ctl_listener = TcpListener(client_ids, counter, trace)
        main_listener = TcpListener(client_ids, counter, trace) if with_main else None
        client_ctl: dict[int, Channel] = {}
        client_main: dict[int, Channel] = {}

        def connect_all():
            # phase order mirrors the accept order: all ctl links first
            for k in client_ids:
                client_ctl[k] = tcp_connect(ctl_listener.port, k, counter, trace)
            if main_listener is not None:
                for k in client_ids:
                    client_main[k] = tcp_connect(main_listener.port, k, counter, trace)

        connector = threading.Thread(target=connect_all, name="tcp-connect")
        connector.start()
        server_ctl = ctl_listener.accept_all()
        server_main = main_listener.accept_all() if main_listener is not None else {}
        connector.join()
        return Fabric(client_ctl, server_ctl, client_main, server_main)
    raise ValueError(f"unknown transport: {kind}")
