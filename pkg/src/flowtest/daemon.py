"""Long-lived daemon exposing the runner over a line-oriented wire protocol.

Transport is newline-delimited JSON objects (UTF-8) over TCP on loopback.
Every request carries a client-chosen ``request_id`` and receives at least
one response tagged with it; run events are streamed to every connected
session as frames carrying ``run_id`` and ``sequence``. Runs execute on a
single executor thread with FIFO queueing, so sessions stay responsive to
``list``/``hello`` while tests are running.

The same port also answers HTTP: static UI assets at ``/`` and a
browser-compatible socket at ``/ws`` speaking the same JSON frames, one
frame per WebSocket text message.
"""

from __future__ import annotations

import base64
import hashlib
import json
import queue
import socket
import struct
import threading
from pathlib import Path
from typing import Any, Optional

from .model import CheckFailure, FlowtestError
from .runner import Runner
from .scheduling import _history_view, filter_match, test_record, PlanEntry

PROTOCOL_VERSION = 1
CAPABILITIES = ["load", "list", "set-options", "run", "rerun-failed", "rerun-last",
                "cancel", "shutdown", "events", "failure-context"]

#: Outbound frames buffered per session before the consumer is dropped.
SESSION_QUEUE_LIMIT = 1024

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

_MIME = {".html": "text/html", ".js": "text/javascript", ".css": "text/css",
         ".map": "application/json", ".json": "application/json", ".svg": "image/svg+xml"}


class _NdjsonTransport:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._reader = sock.makefile("rb")

    def read_message(self) -> Optional[str]:
        raw = self._reader.readline()
        if not raw:
            return None
        return raw.decode("utf-8").rstrip("\n")

    def send(self, text: str) -> None:
        self._sock.sendall(text.encode("utf-8") + b"\n")

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class _WebSocketTransport:
    """Minimal RFC 6455 server side: text, ping/pong, close."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def _read_exact(self, count: int) -> bytes:
        data = b""
        while len(data) < count:
            chunk = self._sock.recv(count - len(data))
            if not chunk:
                raise ConnectionError("websocket peer closed")
            data += chunk
        return data

    def read_message(self) -> Optional[str]:
        while True:
            try:
                head = self._read_exact(2)
            except (ConnectionError, OSError):
                return None
            opcode = head[0] & 0x0F
            masked = head[1] & 0x80
            length = head[1] & 0x7F
            if length == 126:
                length = struct.unpack(">H", self._read_exact(2))[0]
            elif length == 127:
                length = struct.unpack(">Q", self._read_exact(8))[0]
            mask = self._read_exact(4) if masked else b"\x00" * 4
            payload = self._read_exact(length)
            if masked:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            if opcode == 0x8:  # close
                return None
            if opcode == 0x9:  # ping -> pong
                self._write_frame(0xA, payload)
                continue
            if opcode in (0x1, 0x2):
                return payload.decode("utf-8")

    def _write_frame(self, opcode: int, payload: bytes) -> None:
        header = bytes([0x80 | opcode])
        length = len(payload)
        if length < 126:
            header += bytes([length])
        elif length < 1 << 16:
            header += bytes([126]) + struct.pack(">H", length)
        else:
            header += bytes([127]) + struct.pack(">Q", length)
        self._sock.sendall(header + payload)

    def send(self, text: str) -> None:
        self._write_frame(0x1, text.encode("utf-8"))

    def close(self) -> None:
        try:
            self._write_frame(0x8, b"")
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


class _Session:
    _ids = 0

    def __init__(self, daemon: "Daemon", transport):
        _Session._ids += 1
        self.id = _Session._ids
        self.daemon = daemon
        self.transport = transport
        self.outbound: "queue.Queue[Optional[str]]" = queue.Queue()
        self.closed = threading.Event()

    def send_json(self, payload: dict) -> bool:
        if self.closed.is_set():
            return False
        if self.outbound.qsize() >= SESSION_QUEUE_LIMIT:
            self.daemon._drop_session(self, "outbound buffer overflow")
            return False
        self.outbound.put(json.dumps(payload))
        return True

    def writer_loop(self) -> None:
        while True:
            item = self.outbound.get()
            if item is None:
                break
            try:
                self.transport.send(item)
            except OSError:
                break
        self.transport.close()

    def reader_loop(self) -> None:
        while not self.closed.is_set():
            try:
                line = self.transport.read_message()
            except OSError:
                break
            if line is None:
                break
            line = line.strip()
            if not line:
                continue
            try:
                request = json.loads(line)
            except json.JSONDecodeError:
                self.send_json({"error": "bad-json"})
                continue
            self.daemon._handle_request(self, request)
        self.daemon._drop_session(self, "disconnected")


class _RunRequest:
    def __init__(self, message: dict, run_id: str):
        self.message = message
        self.run_id = run_id
        self.cancel = threading.Event()


class Daemon:
    """One runner shared by every session; runs execute one at a time, FIFO."""

    def __init__(self, runner: Runner, history: Any = None,
                 project_root: "Path | str | None" = None,
                 host: str = "127.0.0.1", port: int = 0,
                 ui_dir: "Path | str | None" = None):
        if history is not None:
            runner.history = history
        self.runner = runner
        from .discovery import SuiteRegistry

        self.registry = SuiteRegistry()
        self.project_root = Path(project_root) if project_root else None
        self.host = host
        self.port = port
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self._sessions: dict[int, _Session] = {}
        self._sessions_lock = threading.Lock()
        self._run_queue: "queue.Queue[Optional[_RunRequest]]" = queue.Queue()
        self._requests: dict[str, _RunRequest] = {}
        self._shutdown = threading.Event()
        self._server: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> int:
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            server.bind((self.host, self.port))
        except OSError as exc:
            raise FlowtestError(f"cannot bind daemon to {self.host}:{self.port}: {exc}") from exc
        server.listen(32)
        server.settimeout(0.2)
        self._server = server
        self.port = server.getsockname()[1]
        self.runner.add_tap(self._broadcast_event)
        for target in (self._accept_loop, self._executor_loop):
            thread = threading.Thread(target=target, daemon=True)
            thread.start()
            self._threads.append(thread)
        return self.port

    def stop(self) -> None:
        if self._shutdown.is_set():
            return
        self._shutdown.set()
        self._run_queue.put(None)
        self.runner.remove_tap(self._broadcast_event)
        with self._sessions_lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            self._drop_session(session, "daemon shutdown")
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass

    def wait(self) -> None:
        """Block until shutdown is requested."""
        self._shutdown.wait()
        for thread in self._threads:
            thread.join(timeout=2)

    # -- connection plumbing --------------------------------------------------

    def _accept_loop(self) -> None:
        assert self._server is not None
        while not self._shutdown.is_set():
            try:
                conn, _addr = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._serve_connection, args=(conn,), daemon=True).start()

    def _serve_connection(self, conn: socket.socket) -> None:
        try:
            head = conn.recv(4, socket.MSG_PEEK)
        except OSError:
            conn.close()
            return
        if head[:4] in (b"GET ", b"POST", b"HEAD", b"PUT ", b"OPTI"):
            self._serve_http(conn)
            return
        self._attach_session(_NdjsonTransport(conn))

    def _attach_session(self, transport) -> None:
        session = _Session(self, transport)
        with self._sessions_lock:
            self._sessions[session.id] = session
        threading.Thread(target=session.writer_loop, daemon=True).start()
        session.reader_loop()

    def _drop_session(self, session: _Session, reason: str) -> None:
        if session.closed.is_set():
            return
        session.closed.set()
        with self._sessions_lock:
            self._sessions.pop(session.id, None)
        session.outbound.put(None)

    def _broadcast_event(self, event) -> None:
        frame = event.to_frame()
        with self._sessions_lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            session.send_json(frame)

    # -- HTTP / WebSocket bridge ----------------------------------------------

    def _serve_http(self, conn: socket.socket) -> None:
        reader = conn.makefile("rb")
        request_line = reader.readline().decode("latin-1").strip()
        headers: dict[str, str] = {}
        while True:
            line = reader.readline().decode("latin-1").strip()
            if not line:
                break
            name, _, value = line.partition(":")
            headers[name.strip().lower()] = value.strip()
        parts = request_line.split()
        if len(parts) < 2:
            conn.close()
            return
        method, path = parts[0], parts[1]
        if path == "/ws" and headers.get("upgrade", "").lower() == "websocket":
            key = headers.get("sec-websocket-key", "")
            accept = base64.b64encode(
                hashlib.sha1((key + _WS_GUID).encode("ascii")).digest()
            ).decode("ascii")
            conn.sendall(
                b"HTTP/1.1 101 Switching Protocols\r\n"
                b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
                b"Sec-WebSocket-Accept: " + accept.encode("ascii") + b"\r\n\r\n"
            )
            self._attach_session(_WebSocketTransport(conn))
            return
        if method != "GET":
            self._http_response(conn, 405, b"method not allowed")
            return
        self._serve_static(conn, path)

    def _serve_static(self, conn: socket.socket, path: str) -> None:
        if self.ui_dir is None or not self.ui_dir.is_dir():
            self._http_response(conn, 404, b"no UI assets configured; connect via NDJSON or /ws")
            return
        name = "index.html" if path in ("/", "") else path.lstrip("/")
        target = (self.ui_dir / name).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            self._http_response(conn, 404, b"not found")
            return
        body = target.read_bytes()
        mime = _MIME.get(target.suffix, "application/octet-stream")
        self._http_response(conn, 200, body, mime)

    @staticmethod
    def _http_response(conn: socket.socket, status: int, body: bytes,
                       mime: str = "text/plain") -> None:
        reason = {200: "OK", 404: "Not Found", 405: "Method Not Allowed"}.get(status, "")
        head = (f"HTTP/1.1 {status} {reason}\r\nContent-Type: {mime}\r\n"
                f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n")
        try:
            conn.sendall(head.encode("latin-1") + body)
        finally:
            conn.close()

    # -- request handling -------------------------------------------------------

    def _handle_request(self, session: _Session, request: dict) -> None:
        request_id = request.get("request_id")
        op = request.get("op")
        params = request.get("params") or {}

        def ok(**fields: Any) -> None:
            session.send_json({"request_id": request_id, "ok": True, **fields})

        def fail(code: str, detail: str = "") -> None:
            session.send_json({"request_id": request_id, "ok": False,
                               "error": code, "detail": detail})

        try:
            if op == "hello":
                ok(version=PROTOCOL_VERSION, capabilities=CAPABILITIES)
            elif op == "load":
                count = self._load(params.get("root"))
                forest = self.runner.loaded_hierarchy()
                ok(suites=count, hierarchy=[node.to_json() for node in forest])
            elif op == "list":
                ok(tests=self._list(params.get("filter")))
            elif op == "set-options":
                options = self.runner.handle({"type": "set-options",
                                              "options": params.get("options", {})})
                ok(options=_options_json(options))
            elif op in ("run", "rerun-failed"):
                run_id = self._enqueue_run(op, params)
                ok(run_id=run_id)
            elif op == "rerun-last":
                previous = getattr(self.runner, "_last_plan_request", None)
                if previous is None:
                    fail("nothing-to-rerun", "no run has completed yet")
                else:
                    run_id = self._enqueue_run("run", {
                        **params,
                        "roots": previous["roots"],
                        "filter": previous["filter_query"],
                    })
                    ok(run_id=run_id)
            elif op == "cancel":
                target = self._requests.get(params.get("run_id", ""))
                if target is None:
                    fail("unknown-run", params.get("run_id", ""))
                else:
                    target.cancel.set()
                    ok()
            elif op == "shutdown":
                ok()
                self.stop()
            else:
                fail("unknown-op", str(op))
        except FlowtestError as exc:
            fail("request-failed", str(exc))
        except Exception as exc:  # defensive: a bad request must not kill the session
            fail("internal-error", f"{type(exc).__name__}: {exc}")

    def _load(self, root: "str | None") -> int:
        from .discovery import load_project_suites

        base = Path(root) if root else self.project_root
        if base is None:
            raise FlowtestError("no project root configured; pass params.root")
        return len(load_project_suites(self.runner, base, registry=self.registry))

    def _list(self, query: Optional[str]) -> list[dict]:
        history = _history_view(self.runner)
        descriptors = []
        for node in self.runner.loaded_hierarchy():
            for path, case in node.walk():
                entry = PlanEntry(case.id, case, path)
                if not filter_match(query, test_record(entry, history)):
                    continue
                descriptor: dict[str, Any] = {
                    "id": case.id,
                    "suite_path": list(path),
                    "description": case.description,
                    "metadata": dict(case.metadata),
                }
                record = history.get(case.id)
                if record is not None:
                    descriptor["last_outcome"] = record.outcome
                    descriptor["last_duration_s"] = record.duration
                descriptors.append(descriptor)
        return descriptors

    def _enqueue_run(self, op: str, params: dict) -> str:
        run_id = self.runner.next_run_id("run")
        message: dict[str, Any] = {
            "type": "rerun-failed" if op == "rerun-failed" else "execute-loaded",
            "run_id": run_id,
        }
        if params.get("options"):
            message["options"] = params["options"]
        if params.get("filter") is not None:
            message["filter"] = params["filter"]
        if params.get("roots") is not None:
            message["roots"] = params["roots"]
        request = _RunRequest(message, run_id)
        message["cancel"] = request.cancel
        self._requests[run_id] = request
        self._run_queue.put(request)
        return run_id

    def _executor_loop(self) -> None:
        while not self._shutdown.is_set():
            request = self._run_queue.get()
            if request is None:
                break
            try:
                if not self.runner.loaded_hierarchy() and self.project_root is not None:
                    self._load(None)
                self.runner.handle(request.message)
            except CheckFailure:
                pass  # the aborted run-finished frame already went out
            except Exception as exc:
                self._broadcast_raw({"event": "run-error", "run_id": request.run_id,
                                     "message": f"{type(exc).__name__}: {exc}"})
            finally:
                self._requests.pop(request.run_id, None)

    def _broadcast_raw(self, frame: dict) -> None:
        with self._sessions_lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            session.send_json(frame)


def _options_json(options) -> dict:
    from dataclasses import asdict

    return asdict(options)


def serve(bind_address: tuple[str, int], runner: Runner, history: Any = None,
          project_root: "Path | str | None" = None,
          ui_dir: "Path | str | None" = None) -> None:
    """Run a daemon on ``bind_address`` until a client asks it to shut down."""
    daemon = Daemon(runner, history=history, project_root=project_root,
                    host=bind_address[0], port=bind_address[1], ui_dir=ui_dir)
    port = daemon.start()
    print(f"flowtest daemon listening on {daemon.host}:{port}", flush=True)
    daemon.wait()


class DaemonClient:
    """Small NDJSON client for editor integrations and tests."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._reader = self._sock.makefile("rb")
        self._ids = 0
        self._backlog: list[dict] = []

    def request(self, op: str, params: Optional[dict] = None) -> dict:
        """Send one request and return its tagged response, buffering frames."""
        self._ids += 1
        request_id = f"c{self._ids}"
        line = json.dumps({"op": op, "request_id": request_id, "params": params or {}})
        self._sock.sendall(line.encode("utf-8") + b"\n")
        while True:
            frame = self._read()
            if frame.get("request_id") == request_id:
                return frame
            self._backlog.append(frame)

    def next_frame(self) -> dict:
        if self._backlog:
            return self._backlog.pop(0)
        return self._read()

    def frames_until(self, event: str, run_id: Optional[str] = None) -> list[dict]:
        """Collect streamed frames up to and including the named event."""
        collected = []
        while True:
            frame = self.next_frame()
            if run_id is not None and frame.get("run_id") != run_id:
                continue
            collected.append(frame)
            if frame.get("event") == event:
                return collected

    def _read(self) -> dict:
        line = self._reader.readline()
        if not line:
            raise ConnectionError("daemon closed the connection")
        return json.loads(line.decode("utf-8"))

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
