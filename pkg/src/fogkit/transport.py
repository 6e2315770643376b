"""JSON-over-HTTP plumbing shared by every node, with per-node byte accounting.

Each node owns a tiny threaded HTTP server and a client. Every request and
response body is a wire envelope; the sender of a body adds its canonical
body byte count to its own account, so summing the accounts of all nodes
gives total traffic in both directions without double counting.
"""

from __future__ import annotations

import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlparse

import requests

from .model import EnvelopeError, MsgType, WireEnvelope, decode_envelope, encode_envelope

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0


class TransportError(RuntimeError):
    """The peer could not be reached or the exchange failed at the HTTP level."""


class RemoteError(RuntimeError):
    """The peer answered with an error envelope."""

    def __init__(self, code: str, message: str, http_status: int):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.http_status = http_status


class ApiError(Exception):
    """Raised inside node handlers; rendered as an error envelope."""

    def __init__(self, code: str, message: str, http_status: int = 400):
        super().__init__(message)
        self.code = code
        self.message = message
        self.http_status = http_status


def not_found(message: str) -> ApiError:
    return ApiError("not_found", message, 404)


def conflict(message: str) -> ApiError:
    return ApiError("conflict", message, 409)


def auth_failure(message: str) -> ApiError:
    return ApiError("auth_failure", message, 403)


def unavailable(message: str) -> ApiError:
    return ApiError("unavailable", message, 503)


def bad_request(message: str) -> ApiError:
    return ApiError("bad_request", message, 400)


class ByteAccount:
    """Thread-safe count of envelope body bytes this node has sent."""

    def __init__(self):
        self._lock = threading.Lock()
        self._total = 0

    def add(self, n: int) -> None:
        with self._lock:
            self._total += n

    @property
    def total(self) -> int:
        with self._lock:
            return self._total


# handler(path_match, request_envelope_or_None, query_params) -> (msg_type, body)
Handler = Callable[[re.Match, WireEnvelope | None, dict], tuple[MsgType, dict]]


class _Route:
    def __init__(self, method: str, pattern: str, handler: Handler):
        self.method = method
        self.regex = re.compile(f"^{pattern}$")
        self.handler = handler


class NodeHttpServer:
    """Threaded HTTP server binding an ephemeral loopback port by default."""

    def __init__(self, node_id: str, account: ByteAccount, port: int = 0):
        self.node_id = node_id
        self.account = account
        self._port = port
        self._routes: list[_Route] = []
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        self.address: str | None = None

    def add_route(self, method: str, pattern: str, handler: Handler) -> None:
        self._routes.append(_Route(method, pattern, handler))

    def start(self) -> str:
        owner = self

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # quiet
                pass

            def _dispatch(self, method: str):
                parsed = urlparse(self.path)
                query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
                body = b""
                length = int(self.headers.get("Content-Length") or 0)
                if length:
                    body = self.rfile.read(length)
                for route in owner._routes:
                    if route.method != method:
                        continue
                    match = route.regex.match(parsed.path)
                    if match is None:
                        continue
                    return self._run(route, match, body, query)
                self._reply(404, MsgType.ERROR, {"code": "not_found", "message": f"no route {method} {parsed.path}"})

            def _run(self, route: _Route, match: re.Match, body: bytes, query: dict):
                envelope = None
                if body:
                    try:
                        envelope = decode_envelope(body)
                    except EnvelopeError as exc:
                        return self._reply(400, MsgType.ERROR, {"code": "bad_request", "message": str(exc)})
                try:
                    msg_type, reply = route.handler(match, envelope, query)
                except ApiError as exc:
                    return self._reply(exc.http_status, MsgType.ERROR, {"code": exc.code, "message": exc.message})
                except Exception as exc:  # keep the daemon alive on handler bugs
                    log.exception("handler failure on %s", self.path)
                    return self._reply(500, MsgType.ERROR, {"code": "internal", "message": str(exc)})
                self._reply(200, msg_type, reply)

            def _reply(self, status: int, msg_type: MsgType, body: dict):
                env = WireEnvelope(msg_type=msg_type, sender_id=owner.node_id, body=body)
                data = encode_envelope(env)
                owner.account.add(env.body_bytes)
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                try:
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

        self._server = ThreadingHTTPServer(("127.0.0.1", self._port), _Handler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, name=f"http-{self.node_id}", daemon=True)
        self._thread.start()
        host, port = self._server.server_address[:2]
        self.address = f"{host}:{port}"
        return self.address

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


class HttpClient:
    """Envelope-speaking HTTP client with one requests session per thread."""

    def __init__(self, sender_id: str, account: ByteAccount | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.sender_id = sender_id
        self.account = account or ByteAccount()
        self.timeout = timeout
        self._local = threading.local()
        self._sessions: list[requests.Session] = []
        self._sessions_lock = threading.Lock()

    def _session(self) -> requests.Session:
        sess = getattr(self._local, "session", None)
        if sess is None:
            sess = requests.Session()
            self._local.session = sess
            with self._sessions_lock:
                self._sessions.append(sess)
        return sess

    def post(self, address: str, path: str, msg_type: MsgType, body: dict, timeout: float | None = None) -> dict:
        env = WireEnvelope(msg_type=msg_type, sender_id=self.sender_id, body=body)
        data = encode_envelope(env)
        self.account.add(env.body_bytes)
        try:
            resp = self._session().post(
                f"http://{address}{path}",
                data=data,
                headers={"Content-Type": "application/json"},
                timeout=timeout or self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"POST {address}{path}: {exc}") from None
        return self._unwrap(resp)

    def get(self, address: str, path: str, params: dict | None = None, timeout: float | None = None) -> dict:
        try:
            resp = self._session().get(
                f"http://{address}{path}", params=params, timeout=timeout or self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"GET {address}{path}: {exc}") from None
        return self._unwrap(resp)

    @staticmethod
    def _unwrap(resp: requests.Response) -> dict:
        try:
            env = decode_envelope(resp.content)
        except EnvelopeError as exc:
            raise TransportError(f"undecodable response from {resp.url}: {exc}") from None
        if env.msg_type is MsgType.ERROR:
            raise RemoteError(
                env.body.get("code", "unknown"), env.body.get("message", ""), resp.status_code
            )
        return env.body

    def close(self) -> None:
        with self._sessions_lock:
            for sess in self._sessions:
                try:
                    sess.close()
                except Exception:
                    pass
            self._sessions.clear()
