"""Standalone controller servers: northbound REST and southbound TCP.

`serve` mode runs the same controller core as the simulation, but on
real sockets and wall-clock time. The southbound listener speaks the
binary frame protocol (one TCP connection per agent); the REST server
exposes provisioning and inventory. A single lock serializes every
entry point, which trivially satisfies the per-slice serialization the
admission path requires.

Authentication: if an admin token is configured (SDRANSIM_TOKEN in the
environment, or passed explicitly), REST requests must carry it as a
bearer token.
"""

from __future__ import annotations

import json
import os
import re
import socketserver
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional, Tuple
from urllib.parse import parse_qs, urlparse

from . import wire
from .controller import (
    Controller,
    ControllerConfig,
    ControllerError,
    InvalidStateError,
    UnknownEnbError,
    UnknownSliceError,
)
from .policy import PolicyError

TOKEN_ENV = "SDRANSIM_TOKEN"


class ControllerServer:
    """Bundles a controller with its two listeners and a shared lock."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        rest_port: int = 8080,
        southbound_port: int = 4433,
        config: Optional[ControllerConfig] = None,
        journal_path: Optional[str] = None,
        token: Optional[str] = None,
    ):
        self.lock = threading.RLock()
        self.token = token if token is not None else os.environ.get(TOKEN_ENV) or None
        self._t0 = time.monotonic()
        self._stopped = False
        self.controller = Controller(
            config=config or ControllerConfig(),
            clock=self._clock,
            defer=self._defer,
            journal_path=journal_path,
        )
        self._rest = _RestServer((host, rest_port), _RestHandler)
        self._rest.server_ref = self
        self._south = _SouthboundServer((host, southbound_port), _SouthboundHandler)
        self._south.server_ref = self
        self._threads = []

    def _clock(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)

    def _defer(self, delay_ms: int, fn) -> threading.Timer:
        def _locked() -> None:
            if self._stopped:
                return
            with self.lock:
                fn()

        timer = threading.Timer(max(delay_ms, 0) / 1000.0, _locked)
        timer.daemon = True
        timer.start()
        return timer

    @property
    def rest_address(self) -> Tuple[str, int]:
        return self._rest.server_address[:2]

    @property
    def southbound_address(self) -> Tuple[str, int]:
        return self._south.server_address[:2]

    def start(self) -> None:
        for srv in (self._rest, self._south):
            thread = threading.Thread(target=srv.serve_forever, daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._stopped = True
        self._rest.shutdown()
        self._south.shutdown()
        self._rest.server_close()
        self._south.server_close()

    def serve_forever(self) -> None:
        self.start()
        try:
            while True:
                time.sleep(1)
        except KeyboardInterrupt:
            self.stop()


class _RestServer(ThreadingHTTPServer):
    allow_reuse_address = True
    server_ref: ControllerServer


class _SouthboundServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    server_ref: ControllerServer


class _SouthboundHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: ControllerServer = self.server.server_ref
        sock = self.request
        send_lock = threading.Lock()
        closed = threading.Event()

        def send(data: bytes) -> None:
            with send_lock:
                try:
                    sock.sendall(data)
                except OSError:
                    closed.set()

        def close() -> None:
            closed.set()
            try:
                sock.shutdown(2)
            except OSError:
                pass

        with server.lock:
            conn_id = server.controller.connection_opened(send, close)
        reader = wire.FrameReader()
        try:
            while not closed.is_set():
                try:
                    chunk = sock.recv(65536)
                except OSError:
                    break
                if not chunk:
                    break
                try:
                    messages = reader.feed(chunk)
                except wire.WireError:
                    break
                for msg in messages:
                    with server.lock:
                        server.controller.on_message(conn_id, msg)
        finally:
            with server.lock:
                server.controller.connection_closed(conn_id)


_ROUTES = [
    ("POST", re.compile(r"^/enbs$"), "post_enbs"),
    ("GET", re.compile(r"^/enbs$"), "get_enbs"),
    ("POST", re.compile(r"^/slices$"), "post_slices"),
    ("GET", re.compile(r"^/slices$"), "get_slices"),
    ("GET", re.compile(r"^/slices/(?P<rsi>\d+)$"), "get_slice"),
    ("PUT", re.compile(r"^/slices/(?P<rsi>\d+)$"), "put_slice"),
    ("DELETE", re.compile(r"^/slices/(?P<rsi>\d+)$"), "delete_slice"),
    ("POST", re.compile(r"^/slices/(?P<rsi>\d+)/activate$"), "post_activate"),
    ("POST", re.compile(r"^/slices/(?P<rsi>\d+)/deactivate$"), "post_deactivate"),
    ("GET", re.compile(r"^/slices/(?P<rsi>\d+)/measurements$"), "get_measurements"),
    ("GET", re.compile(r"^/ues$"), "get_ues"),
    ("GET", re.compile(r"^/jobs/(?P<job>[\w-]+)$"), "get_job"),
]


class _RestHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    # -- helpers ---------------------------------------------------------

    def _reply(self, status: int, payload) -> None:
        body = json.dumps(payload, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, code: str, message: str) -> None:
        self._reply(status, {"code": code, "message": message})

    def _body(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValueError(f"invalid JSON body: {exc}") from exc

    def _authorized(self) -> bool:
        token = self.server.server_ref.token
        if not token:
            return True
        header = self.headers.get("Authorization", "")
        return header == f"Bearer {token}"

    def _dispatch(self, method: str) -> None:
        server: ControllerServer = self.server.server_ref
        parsed = urlparse(self.path)
        if not self._authorized():
            self._error(401, "unauthorized", "missing or bad admin token")
            return
        for verb, pattern, name in _ROUTES:
            if verb != method:
                continue
            m = pattern.match(parsed.path)
            if not m:
                continue
            handler = getattr(self, name)
            try:
                with server.lock:
                    handler(server.controller, m.groupdict(), parse_qs(parsed.query))
            except (PolicyError, ValueError) as exc:
                self._error(400, "validation", str(exc))
            except UnknownSliceError as exc:
                self._error(404, "unknown-slice", str(exc))
            except UnknownEnbError as exc:
                self._error(409, "enb-unavailable", str(exc))
            except InvalidStateError as exc:
                self._error(409, "invalid-state", str(exc))
            except ControllerError as exc:
                self._error(404, "not-found", str(exc))
            return
        self._error(404, "no-route", f"{method} {parsed.path}")

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")

    def do_PUT(self) -> None:
        self._dispatch("PUT")

    def do_DELETE(self) -> None:
        self._dispatch("DELETE")

    # -- endpoints ---------------------------------------------------------

    def post_enbs(self, ctrl: Controller, args, query) -> None:
        body = self._body()
        if "enb_id" not in body:
            raise ValueError("body must carry enb_id")
        created = ctrl.register_enb(int(body["enb_id"]))
        self._reply(201 if created else 200, {"enb_id": int(body["enb_id"]),
                                              "created": created})

    def get_enbs(self, ctrl: Controller, args, query) -> None:
        self._reply(200, ctrl.enbs_view())

    def post_slices(self, ctrl: Controller, args, query) -> None:
        job_id, rsi_id = ctrl.commission_slice(self._body())
        self._reply(202, {"job_id": job_id, "rsi_id": rsi_id})

    def get_slices(self, ctrl: Controller, args, query) -> None:
        self._reply(200, ctrl.slices_view())

    def get_slice(self, ctrl: Controller, args, query) -> None:
        self._reply(200, ctrl.slice_view(int(args["rsi"])))

    def put_slice(self, ctrl: Controller, args, query) -> None:
        job_id = ctrl.update_slice(int(args["rsi"]), self._body())
        self._reply(202, {"job_id": job_id})

    def delete_slice(self, ctrl: Controller, args, query) -> None:
        job_id = ctrl.decommission_slice(int(args["rsi"]))
        self._reply(202, {"job_id": job_id})

    def post_activate(self, ctrl: Controller, args, query) -> None:
        ctrl.activate_slice(int(args["rsi"]))
        self._reply(200, {"rsi_id": int(args["rsi"]), "state": "active"})

    def post_deactivate(self, ctrl: Controller, args, query) -> None:
        ctrl.deactivate_slice(int(args["rsi"]))
        self._reply(200, {"rsi_id": int(args["rsi"]), "state": "deactivated"})

    def get_measurements(self, ctrl: Controller, args, query) -> None:
        since = int(query.get("since", ["0"])[0])
        self._reply(200, ctrl.measurements_view(int(args["rsi"]), since))

    def get_ues(self, ctrl: Controller, args, query) -> None:
        self._reply(200, ctrl.ues_view())

    def get_job(self, ctrl: Controller, args, query) -> None:
        self._reply(200, ctrl.job_view(args["job"]))
