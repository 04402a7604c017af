"""HTTP control plane: status, live frame, manual dispense, schedule CRUD,
and a replay-then-follow event stream, plus the optional cloud mirror.

Endpoints (fixed paths):
    GET  /status            JSON status snapshot
    GET  /frame             binary PGM, X-Capture-Timestamp header (ms)
    POST /dispense          {"target": "food"|"water", "quantity": n} -> command id
    GET  /schedule          current schedule + version
    PUT  /schedule          atomic replace, persisted before the 200
    GET  /events?since=N    newline-delimited JSON events, then live follow
    GET  /                  dashboard static assets when configured

Reads never block a tick; every mutation goes through the runtime's command
queue. The mirror publisher runs on its own thread with exponential backoff
so a dead endpoint cannot disturb capture cadence.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlparse

from .actuation import Target
from .control import AlertKind, InvalidScheduleError, Schedule
from .events import EventKind
from .runtime import FeederRuntime, NoFrameYetError, QuantityOutOfRangeError

logger = logging.getLogger(__name__)

STREAM_POLL_S = 0.25

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".png": "image/png",
    ".svg": "image/svg+xml",
}


class MirrorPublisher:
    """Pushes the latest reading to a remote URL without blocking ticks.

    Keeps only the newest snapshot (stale ones are superseded), PUTs it as
    JSON, and backs off exponentially while the endpoint is unreachable. The
    first failure of an outage is logged as an alert event; recovery resets
    the backoff.
    """

    def __init__(
        self,
        url: str,
        log,
        clock,
        timeout_s: float = 2.0,
        base_backoff_s: float = 0.5,
        max_backoff_s: float = 30.0,
    ):
        self.url = url
        self._log = log
        self._clock = clock
        self._timeout_s = timeout_s
        self._base_backoff_s = base_backoff_s
        self._max_backoff_s = max_backoff_s
        self._latest: Optional[dict] = None
        self._cond = threading.Condition()
        self._stop = threading.Event()
        self._failing = False
        self.published = 0
        self._thread = threading.Thread(target=self._run, name="mirror", daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        with self._cond:
            self._cond.notify_all()
        self._thread.join(timeout=5.0)

    def offer(self, payload: dict) -> None:
        """Called from the tick thread; never blocks."""
        with self._cond:
            self._latest = payload
            self._cond.notify_all()

    def _take(self, timeout: float) -> Optional[dict]:
        with self._cond:
            if self._latest is None:
                self._cond.wait(timeout)
            payload, self._latest = self._latest, None
            return payload

    def _run(self) -> None:
        backoff = self._base_backoff_s
        while not self._stop.is_set():
            payload = self._take(timeout=1.0)
            if payload is None:
                continue
            if self._publish(payload):
                self._failing = False
                backoff = self._base_backoff_s
                self.published += 1
                continue
            if not self._failing:
                self._failing = True
                self._log.append(
                    EventKind.ALERT,
                    {
                        "alert": AlertKind.MIRROR_UNREACHABLE.value,
                        "message": f"mirror {self.url} unreachable; retrying with backoff",
                    },
                    ts_ms=self._clock.now_ms(),
                )
            with self._cond:  # retry the freshest payload after the backoff
                if self._latest is None:
                    self._latest = payload
            self._stop.wait(backoff)
            backoff = min(backoff * 2, self._max_backoff_s)

    def _publish(self, payload: dict) -> bool:
        body = json.dumps(payload).encode("utf-8")
        request = urllib.request.Request(
            self.url,
            data=body,
            method="PUT",
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(request, timeout=self._timeout_s) as response:
                return 200 <= response.status < 300
        except (urllib.error.URLError, OSError, ValueError) as exc:
            logger.debug("mirror publish failed: %s", exc)
            return False


class FeederHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, runtime: FeederRuntime, static_dir: Optional[Path] = None):
        super().__init__(addr, _Handler)
        self.runtime = runtime
        self.static_dir = Path(static_dir).resolve() if static_dir else None


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: FeederHTTPServer

    # ------------------------------------------------------------- plumbing

    def log_message(self, fmt, *args):
        logger.debug("%s - %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, status: int, error: str, message: str) -> None:
        self._send_json(status, {"error": error, "message": message})

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length", 0))
        return self.rfile.read(length) if length else b""

    # ------------------------------------------------------------- GET

    def do_GET(self):
        parsed = urlparse(self.path)
        route = parsed.path.rstrip("/") or "/"
        if route == "/status":
            self._send_json(200, self.server.runtime.status().to_dict())
        elif route == "/frame":
            self._get_frame()
        elif route == "/schedule":
            schedule, version = self.server.runtime.get_schedule()
            self._send_json(200, dict(schedule.to_dict(), version=version))
        elif route == "/events":
            self._stream_events(parse_qs(parsed.query))
        else:
            self._serve_static(route)

    def _get_frame(self):
        try:
            raw, ts_ms = self.server.runtime.latest_frame()
        except NoFrameYetError as exc:
            self._send_error_json(404, "no_frame_yet", str(exc))
            return
        self.send_response(200)
        self.send_header("Content-Type", "image/x-portable-graymap")
        self.send_header("Content-Length", str(len(raw)))
        self.send_header("X-Capture-Timestamp", str(ts_ms))
        self.end_headers()
        self.wfile.write(raw)

    def _stream_events(self, query):
        try:
            since = int(query.get("since", ["0"])[0])
            follow = query.get("follow", ["1"])[0] not in ("0", "false")
        except ValueError:
            self._send_error_json(400, "bad_request", "since must be an integer")
            return
        if since < 0:
            self._send_error_json(400, "bad_request", "since must be >= 0")
            return
        log = self.server.runtime.log
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Cache-Control", "no-store")
        self.send_header("Connection", "close")
        self.end_headers()
        cursor = since
        try:
            while True:
                for event in log.events_since(cursor):
                    self.wfile.write((event.to_json_line() + "\n").encode("utf-8"))
                    cursor = event.seq
                self.wfile.flush()
                if not follow:
                    return
                log.wait_for_seq(cursor, timeout=STREAM_POLL_S)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client went away

    def _serve_static(self, route: str):
        root = self.server.static_dir
        if root is None:
            self._send_error_json(404, "not_found", f"no handler for {route}")
            return
        relative = "index.html" if route == "/" else route.lstrip("/")
        target = (root / relative).resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            self._send_error_json(404, "not_found", f"no asset at {route}")
            return
        body = target.read_bytes()
        self.send_response(200)
        self.send_header(
            "Content-Type", _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        )
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    # ------------------------------------------------------------- mutations

    def do_POST(self):
        route = urlparse(self.path).path.rstrip("/")
        if route != "/dispense":
            self._send_error_json(404, "not_found", f"no handler for {route}")
            return
        try:
            raw = json.loads(self._read_body() or b"{}")
            target = Target(raw["target"])
            quantity = float(raw["quantity"])
        except (ValueError, KeyError, TypeError) as exc:
            self._send_error_json(400, "bad_request", f"invalid dispense request: {exc}")
            return
        try:
            command_id = self.server.runtime.submit_dispense(target, quantity, source="api")
        except QuantityOutOfRangeError as exc:
            self._send_error_json(400, "quantity_out_of_range", str(exc))
            return
        self._send_json(202, {"id": command_id, "status": "accepted"})

    def do_PUT(self):
        route = urlparse(self.path).path.rstrip("/")
        if route != "/schedule":
            self._send_error_json(404, "not_found", f"no handler for {route}")
            return
        try:
            schedule = Schedule.from_dict(json.loads(self._read_body() or b"{}"))
        except InvalidScheduleError as exc:
            self._send_error_json(400, "invalid_schedule", str(exc))
            return
        except (ValueError, KeyError, TypeError) as exc:
            self._send_error_json(400, "bad_request", f"invalid schedule body: {exc}")
            return
        try:
            version = self.server.runtime.submit_schedule(schedule)
        except TimeoutError as exc:
            self._send_error_json(503, "not_applied", str(exc))
            return
        self._send_json(200, dict(schedule.to_dict(), version=version))


def serve(
    runtime: FeederRuntime,
    host: str,
    port: int,
    static_dir: Optional[Path] = None,
) -> FeederHTTPServer:
    """Bind and return the server; the caller drives serve_forever on a thread."""
    server = FeederHTTPServer((host, port), runtime, static_dir=static_dir)
    logger.info("listening on %s:%d", *server.server_address[:2])
    return server
