"""Local stream-socket server for workload phase events.

Wire protocol: newline-delimited JSON objects, one event each. On connect
the server sends a single handshake line ``{"epoch_ns": <int>, "proto": 1}``
so clients can timestamp against the harness's monotonic epoch. Malformed
or oversized (> 64 KiB) lines are rejected and counted without killing the
connection; ordering within one connection is preserved, and the merged
stream is ordered by timestamp only at validation time.

Endpoints: ``tcp:HOST:PORT`` (port 0 picks an ephemeral port) or
``unix:/path/to.sock``.
"""

import json
import os
import socket
import threading

from .errors import BadParams, BindFailed, ParseError
from .phases import PhaseEvent, parse_event_line

MAX_LINE_BYTES = 64 * 1024
PROTO_VERSION = 1


def parse_endpoint(endpoint: str):
    if endpoint.startswith("tcp:"):
        host, _, port = endpoint[4:].rpartition(":")
        if not host or not port:
            raise BadParams(f"bad tcp endpoint {endpoint!r}, expected tcp:HOST:PORT")
        return ("tcp", host, int(port))
    if endpoint.startswith("unix:"):
        path = endpoint[5:]
        if not path:
            raise BadParams(f"bad unix endpoint {endpoint!r}")
        return ("unix", path, None)
    raise BadParams(f"endpoint must start with tcp: or unix:, got {endpoint!r}")


def connect(endpoint: str) -> socket.socket:
    kind, addr, port = parse_endpoint(endpoint)
    if kind == "tcp":
        return socket.create_connection((addr, port), timeout=10)
    sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    sock.settimeout(10)
    sock.connect(addr)
    return sock


class EventServer:
    """Accepts concurrent connections and buffers parsed events."""

    def __init__(self, endpoint: str = "tcp:127.0.0.1:0", epoch_ns: int = 0):
        self.requested_endpoint = endpoint
        self.epoch_ns = epoch_ns
        self.endpoint = None
        self._listener = None
        self._unix_path = None
        self._stop = threading.Event()
        self._threads = []
        self._lock = threading.Lock()
        self._cv = threading.Condition(self._lock)
        self._events: list[PhaseEvent] = []
        self.rejected_lines = 0
        self.connections_seen = 0

    def start(self) -> str:
        kind, addr, port = parse_endpoint(self.requested_endpoint)
        try:
            if kind == "tcp":
                listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                listener.bind((addr, port))
                bound_port = listener.getsockname()[1]
                self.endpoint = f"tcp:{addr}:{bound_port}"
            else:
                if os.path.exists(addr):
                    os.unlink(addr)
                listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                listener.bind(addr)
                self._unix_path = addr
                self.endpoint = f"unix:{addr}"
        except OSError as exc:
            raise BindFailed(f"cannot bind {self.requested_endpoint!r}: {exc}")
        listener.listen(16)
        listener.settimeout(0.2)
        self._listener = listener
        accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._threads.append(accept_thread)
        accept_thread.start()
        return self.endpoint

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            self.connections_seen += 1
            worker = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
            self._threads.append(worker)
            worker.start()

    def _serve_connection(self, conn: socket.socket) -> None:
        handshake = json.dumps({"epoch_ns": self.epoch_ns, "proto": PROTO_VERSION})
        try:
            conn.sendall(handshake.encode("utf-8") + b"\n")
        except OSError:
            conn.close()
            return
        conn.settimeout(0.2)
        buf = b""
        discarding = False
        try:
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(65536)
                except socket.timeout:
                    continue
                except OSError:
                    break
                if not chunk:
                    break
                buf += chunk
                while True:
                    idx = buf.find(b"\n")
                    if idx == -1:
                        if len(buf) > MAX_LINE_BYTES:
                            if not discarding:
                                self._reject()
                                discarding = True
                            buf = b""
                        break
                    line, buf = buf[:idx], buf[idx + 1 :]
                    if discarding:
                        discarding = False
                        continue
                    self._ingest(line)
        finally:
            conn.close()

    def _reject(self) -> None:
        with self._lock:
            self.rejected_lines += 1

    def _ingest(self, line: bytes) -> None:
        text = line.strip()
        if not text:
            return
        if len(text) > MAX_LINE_BYTES:
            self._reject()
            return
        try:
            event = parse_event_line(text.decode("utf-8"))
        except (ParseError, UnicodeDecodeError):
            self._reject()
            return
        with self._cv:
            self._events.append(event)
            self._cv.notify_all()

    def events(self, run_id: str | None = None) -> list[PhaseEvent]:
        with self._lock:
            snapshot = list(self._events)
        if run_id is not None:
            snapshot = [e for e in snapshot if e.run_id == run_id]
        return snapshot

    def event_count(self) -> int:
        with self._lock:
            return len(self._events)

    def wait_for(self, predicate, timeout_s: float) -> bool:
        """Block until predicate(events) is true or the timeout elapses."""
        deadline = timeout_s
        with self._cv:
            while True:
                if predicate(list(self._events)):
                    return True
                if deadline <= 0:
                    return False
                slice_s = min(deadline, 0.1)
                self._cv.wait(slice_s)
                deadline -= slice_s

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for thread in self._threads:
            thread.join(timeout=2.0)
        if self._unix_path and os.path.exists(self._unix_path):
            try:
                os.unlink(self._unix_path)
            except OSError:
                pass


def serve(endpoint: str, epoch_ns: int = 0) -> EventServer:
    """Bind and start an event server; the caller stops it when the run ends."""
    server = EventServer(endpoint, epoch_ns=epoch_ns)
    server.start()
    return server
