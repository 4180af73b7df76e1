"""HTTPS plumbing: a small threaded mTLS JSON server and a matching client.

Every listener is TLS-only.  The server asks for (but does not require) a
client certificate; OpenSSL checks it against the anchors it was given and
the application layer then re-validates it with :func:`pki.verify_chain`
to enforce certificate kinds.
"""

from __future__ import annotations

import http.client
import json
import logging
import os
import socket
import ssl
import tempfile
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Optional
from urllib.parse import parse_qsl, urlencode, urlsplit

from . import errors
from .pki import Certificate

logger = logging.getLogger(__name__)

MAX_BODY = 1 << 20
HANDSHAKE_TIMEOUT = 5.0


# ---------------------------------------------------------------------------
# SSL contexts
# ---------------------------------------------------------------------------


def _load_chain(ctx: ssl.SSLContext, chain_pem: bytes, key_pem: bytes) -> None:
    # ssl only loads keys from files; keep them in a private temp dir just long
    # enough for OpenSSL to read them.
    with tempfile.TemporaryDirectory(prefix="lc-tls-") as tmp:
        cert_path = Path(tmp) / "chain.pem"
        key_path = Path(tmp) / "key.pem"
        cert_path.write_bytes(chain_pem)
        fd = os.open(key_path, os.O_WRONLY | os.O_CREAT, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(key_pem)
        ctx.load_cert_chain(str(cert_path), str(key_path))
        key_path.write_bytes(b"\0" * len(key_pem))


def _server_base(trust_pem: bytes) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_verify_locations(cadata=trust_pem.decode())
    ctx.verify_mode = ssl.CERT_OPTIONAL
    return ctx


def server_context(chain_pem: bytes, key_pem: bytes, trust_pem: bytes) -> ssl.SSLContext:
    ctx = _server_base(trust_pem)
    _load_chain(ctx, chain_pem, key_pem)
    return ctx


def server_context_from_files(certfile: Path, keyfile: Path, trust_pem: bytes) -> ssl.SSLContext:
    """Like :func:`server_context` but the key never leaves its own file."""
    ctx = _server_base(trust_pem)
    ctx.load_cert_chain(str(certfile), str(keyfile))
    return ctx


def client_context(
    trust_pem: bytes,
    chain_pem: Optional[bytes] = None,
    key_pem: Optional[bytes] = None,
) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    # peers are pinned by common name after the handshake instead
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_REQUIRED
    ctx.load_verify_locations(cadata=trust_pem.decode())
    if chain_pem is not None and key_pem is not None:
        _load_chain(ctx, chain_pem, key_pem)
    return ctx


def client_context_from_files(trust_pem: bytes, certfile: Path, keyfile: Path) -> ssl.SSLContext:
    ctx = client_context(trust_pem)
    ctx.load_cert_chain(str(certfile), str(keyfile))
    return ctx


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, str]
    headers: dict[str, str]
    body: bytes
    peer: Optional[Certificate]
    client_address: tuple = ()

    def json(self) -> Any:
        if not self.body:
            raise errors.MalformedRequest("request body required")
        try:
            return json.loads(self.body)
        except (ValueError, UnicodeDecodeError):
            raise errors.MalformedRequest("request body is not valid JSON") from None

    def json_object(self) -> dict:
        body = self.json()
        if not isinstance(body, dict):
            raise errors.MalformedRequest("request body must be a JSON object")
        return body


@dataclass
class Response:
    status: int = 200
    body: Any = None


Handler = Callable[[Request], Any]
Routes = dict[tuple[str, str], Handler]


class _Handler(BaseHTTPRequestHandler):
    server: "_TlsHttpServer"
    protocol_version = "HTTP/1.0"
    server_version = "localcloud"
    sys_version = ""

    def log_message(self, fmt, *args):  # route through logging, not stderr
        logger.debug("%s %s", self.server.name, fmt % args)

    def _dispatch(self, method: str) -> None:
        url = urlsplit(self.path)
        route = self.server.routes.get((method, url.path))
        status, body = 200, None
        try:
            if route is None:
                if any(p == url.path for _, p in self.server.routes):
                    raise _MethodNotAllowed()
                raise errors.NotFound("no such endpoint")
            length = int(self.headers.get("Content-Length") or 0)
            if length < 0 or length > MAX_BODY:
                raise errors.RequestTooLarge("request body too large")
            raw = self.rfile.read(length) if length else b""
            peer = None
            der = self.connection.getpeercert(binary_form=True)
            if der:
                peer = Certificate.from_der(der)
            req = Request(
                method,
                url.path,
                dict(parse_qsl(url.query, keep_blank_values=True)),
                {k.lower(): v for k, v in self.headers.items()},
                raw,
                peer,
                self.client_address,
            )
            result = route(req)
            if isinstance(result, Response):
                status, body = result.status, result.body
            else:
                body = result
        except _MethodNotAllowed:
            status, body = 405, {"errorCode": "MethodNotAllowed", "errorMessage": "method not allowed"}
        except errors.LocalCloudError as exc:
            status, body = exc.status, exc.to_wire()
        except ValueError:
            status, body = 400, errors.MalformedRequest("bad request").to_wire()
        except Exception:
            # details stay in the server log; the peer only sees a generic code
            logger.exception("%s: unhandled error on %s %s", self.server.name, method, url.path)
            status, body = 500, {"errorCode": "InternalError", "errorMessage": "internal error"}
        self._send(status, body)

    def _send(self, status: int, body: Any) -> None:
        payload = b"" if body is None else json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Connection", "close")
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_DELETE(self):
        self._dispatch("DELETE")

    def do_PUT(self):
        self._dispatch("PUT")


class _MethodNotAllowed(Exception):
    pass


class _TlsHttpServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 64

    def __init__(self, address, routes: Routes, ssl_context: Optional[ssl.SSLContext], name: str):
        self.routes = routes
        self.ssl_context = ssl_context
        self.name = name
        self._live: set[socket.socket] = set()
        self._live_lock = threading.Lock()
        super().__init__(address, _Handler)

    def finish_request(self, request, client_address):
        request.settimeout(HANDSHAKE_TIMEOUT)
        ctx = self.ssl_context
        if ctx is None:
            request.close()
            return
        try:
            tls = ctx.wrap_socket(request, server_side=True)
        except (ssl.SSLError, OSError) as exc:
            logger.info("%s: TLS handshake from %s refused: %s", self.name, client_address, exc)
            try:
                request.close()
            except OSError:
                pass
            return
        with self._live_lock:
            self._live.add(tls)
        try:
            tls.settimeout(30)
            self.RequestHandlerClass(tls, client_address, self)
        except (ssl.SSLError, OSError) as exc:
            logger.debug("%s: connection error: %s", self.name, exc)
        finally:
            with self._live_lock:
                self._live.discard(tls)
            try:
                tls.close()
            except OSError:
                pass

    def shutdown_request(self, request):
        # finish_request already closed the TLS wrapper
        try:
            request.close()
        except OSError:
            pass

    def drop_connections(self) -> None:
        with self._live_lock:
            live = list(self._live)
        for s in live:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class TlsServer:
    """Threaded HTTPS server; ``start()`` binds, ``stop()`` closes everything.

    The SSL context may be supplied after binding (``set_context``), so a
    provider can learn its port before it owns a certificate.
    """

    def __init__(
        self,
        routes: Routes,
        ssl_context: Optional[ssl.SSLContext] = None,
        host: str = "127.0.0.1",
        port: int = 0,
        name: str = "server",
    ):
        self.name = name
        try:
            self._httpd = _TlsHttpServer((host, port), routes, ssl_context, name)
        except OSError as exc:
            raise errors.PortInUse(f"{name}: cannot bind {host}:{port}: {exc.strerror}") from None
        self.host = host
        self._thread: Optional[threading.Thread] = None

    @property
    def routes(self) -> Routes:
        return self._httpd.routes

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def bind_host(self) -> str:
        return self._httpd.server_address[0]

    @property
    def url(self) -> str:
        host = "127.0.0.1" if self.host in ("0.0.0.0", "") else self.host
        return f"https://{host}:{self.port}"

    def set_context(self, ctx: ssl.SSLContext) -> None:
        self._httpd.ssl_context = ctx

    def start(self) -> "TlsServer":
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.05}, name=self.name, daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None:
            self._httpd.shutdown()
            self._thread.join(timeout=5)
            self._thread = None
        self._httpd.drop_connections()
        self._httpd.server_close()

    @property
    def running(self) -> bool:
        return self._thread is not None


# ---------------------------------------------------------------------------
# client
# ---------------------------------------------------------------------------


@dataclass
class Exchange:
    """One request as seen by a recording client."""

    method: str
    url: str
    presented_kind: Optional[str]
    presented_cn: Optional[str]
    body: bytes
    status: int = 0
    response: bytes = b""
    at: float = field(default_factory=time.time)


Recorder = Callable[[Exchange], None]


class HttpsClient:
    """JSON-over-HTTPS client bound to one identity (or none).

    Non-2xx responses are re-raised as the :mod:`errors` class the peer
    named.  When ``expect_peer`` is given, the server certificate's common
    name must match it.
    """

    def __init__(
        self,
        ssl_context: ssl.SSLContext,
        *,
        identity: Optional[Certificate] = None,
        timeout: float = 10.0,
        recorder: Optional[Recorder] = None,
        extra_headers: Optional[dict[str, str]] = None,
    ):
        self.ssl_context = ssl_context
        self.identity = identity
        self.timeout = timeout
        self.recorder = recorder
        self.extra_headers = dict(extra_headers or {})

    @classmethod
    def create(
        cls,
        trust_pem: bytes,
        chain_pem: Optional[bytes] = None,
        key_pem: Optional[bytes] = None,
        **kw,
    ) -> "HttpsClient":
        identity = None
        if chain_pem:
            identity = Certificate.from_pem(chain_pem)
        return cls(client_context(trust_pem, chain_pem, key_pem), identity=identity, **kw)

    def request(
        self,
        method: str,
        url: str,
        body: Any = None,
        *,
        query: Optional[dict[str, Any]] = None,
        headers: Optional[dict[str, str]] = None,
        expect_peer: Optional[str] = None,
        raw_body: Optional[bytes] = None,
    ) -> Any:
        parts = urlsplit(url)
        if parts.scheme != "https":
            raise errors.MalformedRequest("only https endpoints are supported")
        path = parts.path or "/"
        if query:
            path += "?" + urlencode({k: str(v) for k, v in query.items()})
        payload = raw_body if raw_body is not None else (b"" if body is None else json.dumps(body).encode())
        hdrs = {"Content-Type": "application/json", "Connection": "close", **self.extra_headers, **(headers or {})}
        exchange = Exchange(
            method,
            url,
            self.identity.kind_or_none.value if self.identity and self.identity.kind_or_none else None,
            self.identity.subject_common_name if self.identity else None,
            payload,
        )
        conn = http.client.HTTPSConnection(
            parts.hostname, parts.port or 443, timeout=self.timeout, context=self.ssl_context
        )
        try:
            try:
                conn.connect()
                if expect_peer is not None:
                    self._check_peer(conn, expect_peer)
                conn.request(method, path, body=payload, headers=hdrs)
                resp = conn.getresponse()
                raw = resp.read()
            except (ConnectionRefusedError, socket.timeout, TimeoutError) as exc:
                raise errors.ServiceUnavailable(f"{parts.netloc} unavailable: {exc}") from None
            except ssl.SSLError as exc:
                raise errors.TransportRejected(f"TLS with {parts.netloc} failed: {exc.reason}") from None
            except (ConnectionResetError, BrokenPipeError, http.client.RemoteDisconnected) as exc:
                # a peer that rejects our client certificate drops the connection
                raise errors.TransportRejected(f"{parts.netloc} closed the connection: {exc}") from None
            except OSError as exc:
                raise errors.ServiceUnavailable(f"{parts.netloc} unreachable: {exc}") from None
        finally:
            conn.close()
        exchange.status = resp.status
        exchange.response = raw
        if self.recorder is not None:
            self.recorder(exchange)
        try:
            data = json.loads(raw) if raw else None
        except ValueError:
            data = None
        if resp.status >= 300:
            raise errors.from_wire(resp.status, data)
        return data

    def _check_peer(self, conn: http.client.HTTPSConnection, expected_cn: str) -> None:
        der = conn.sock.getpeercert(binary_form=True) if conn.sock else None
        if not der or Certificate.from_der(der).subject_common_name != expected_cn:
            raise errors.TransportRejected(f"peer is not {expected_cn!r}")

    def get(self, url: str, **kw) -> Any:
        return self.request("GET", url, **kw)

    def post(self, url: str, body: Any = None, **kw) -> Any:
        return self.request("POST", url, body, **kw)

    def delete(self, url: str, **kw) -> Any:
        return self.request("DELETE", url, **kw)
