"""HTTP response rewriting: hidden-asset injection and cache-header stripping.

The transformation functions are pure and operate on fully buffered messages.
``proxy_serve`` wraps them in a minimal sequential reverse proxy.
"""

from __future__ import annotations

import logging
import socket
import socketserver
from dataclasses import dataclass, replace
from typing import NamedTuple

log = logging.getLogger(__name__)

CACHE_HEADERS = (b"if-modified-since", b"if-none-match")


@dataclass(frozen=True)
class InjectionSpec:
    asset_url: str
    width_attr: str = "1px"
    match_tag: bytes = b"</body>"
    # Empty means every host is rewritten.
    target_hosts: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.asset_url:
            raise ValueError("asset_url must be non-empty")
        if not self.match_tag:
            raise ValueError("match_tag must be non-empty")

    @property
    def tag(self) -> bytes:
        return f'<img src="{self.asset_url}" width="{self.width_attr}" />'.encode()

    def targets(self, host: str | None) -> bool:
        if not self.target_hosts or host is None:
            return not self.target_hosts
        return host.split(":")[0].lower() in {h.lower() for h in self.target_hosts}


class InjectionResult(NamedTuple):
    body: bytes
    matched: bool


@dataclass(frozen=True)
class HttpMessageView:
    start_line: bytes
    headers: tuple[tuple[bytes, bytes], ...] = ()
    body: bytes = b""

    def header(self, name: bytes) -> bytes | None:
        name = name.lower()
        for k, v in self.headers:
            if k.lower() == name:
                return v
        return None

    def with_header(self, name: bytes, value: bytes) -> HttpMessageView:
        """Replace the first header named ``name`` in place, or append it."""
        lname = name.lower()
        out, done = [], False
        for k, v in self.headers:
            if k.lower() == lname:
                if not done:
                    out.append((k, value))
                    done = True
                continue
            out.append((k, v))
        if not done:
            out.append((name, value))
        return replace(self, headers=tuple(out))

    def to_bytes(self) -> bytes:
        head = b"".join(k + b": " + v + b"\r\n" for k, v in self.headers)
        return self.start_line + b"\r\n" + head + b"\r\n" + self.body


class HttpParseError(ValueError):
    pass


def parse_message(data: bytes) -> HttpMessageView:
    """Parse a complete HTTP/1.x message (head plus already-buffered body)."""
    head, sep, body = data.partition(b"\r\n\r\n")
    if not sep:
        raise HttpParseError("missing end of headers")
    lines = head.split(b"\r\n")
    headers = []
    for line in lines[1:]:
        name, colon, value = line.partition(b":")
        if not colon or not name.strip():
            raise HttpParseError(f"malformed header line {line!r}")
        headers.append((name.strip(), value.strip()))
    return HttpMessageView(lines[0], tuple(headers), body)


def inject_asset(body: bytes, spec: InjectionSpec) -> InjectionResult:
    """Insert the hidden image tag before the last occurrence of ``match_tag``."""
    idx = body.lower().rfind(spec.match_tag.lower())
    if idx < 0:
        return InjectionResult(body, False)
    return InjectionResult(body[:idx] + spec.tag + body[idx:], True)


def strip_cache_headers(request: HttpMessageView) -> HttpMessageView:
    kept = tuple((k, v) for k, v in request.headers if k.lower() not in CACHE_HEADERS)
    return replace(request, headers=kept)


def transform_response(
    response: HttpMessageView, spec: InjectionSpec, host: str | None = None
) -> HttpMessageView:
    ctype = response.header(b"content-type") or b""
    if b"text/html" not in ctype.lower() or not spec.targets(host):
        return response
    encoding = (response.header(b"content-encoding") or b"identity").lower()
    chunked = b"chunked" in (response.header(b"transfer-encoding") or b"").lower()
    if chunked or encoding not in (b"identity", b""):
        log.warning("passing through encoded HTML response unmodified")
        return response
    body, matched = inject_asset(response.body, spec)
    if not matched:
        return response
    return replace(response, body=body).with_header(b"Content-Length", str(len(body)).encode())


def _read_message(rfile, read_to_eof: bool) -> bytes:
    head = bytearray()
    while not head.endswith(b"\r\n\r\n"):
        line = rfile.readline(65537)
        if not line:
            if not head:
                return b""
            raise HttpParseError("connection closed inside headers")
        head += line
    view = parse_message(bytes(head))
    length = view.header(b"content-length")
    if length is not None:
        body = rfile.read(int(length))
    elif read_to_eof:
        body = rfile.read()
    else:
        body = b""
    return bytes(head) + body


BAD_GATEWAY = (
    b"HTTP/1.1 502 Bad Gateway\r\nContent-Type: text/plain\r\n"
    b"Content-Length: 11\r\nConnection: close\r\n\r\nBad Gateway"
)


def forward(request: HttpMessageView, origin: tuple[str, int], spec: InjectionSpec, timeout: float = 10.0) -> bytes:
    """Send one request to the origin and return the transformed response bytes."""
    request = strip_cache_headers(request).with_header(b"Connection", b"close")
    try:
        with socket.create_connection(origin, timeout=timeout) as sock:
            sock.sendall(request.to_bytes())
            raw = _read_message(sock.makefile("rb"), read_to_eof=True)
    except OSError as exc:
        log.warning("origin %s:%d unreachable: %s", *origin, exc)
        return BAD_GATEWAY
    if not raw:
        return BAD_GATEWAY
    response = parse_message(raw)
    host = request.header(b"host")
    return transform_response(response, spec, host.decode("latin-1") if host else None).to_bytes()


class _ProxyHandler(socketserver.StreamRequestHandler):
    def handle(self):
        try:
            raw = _read_message(self.rfile, read_to_eof=False)
            if not raw:
                return
            request = parse_message(raw)
        except (HttpParseError, ValueError) as exc:
            log.warning("closing connection from %s: %s", self.client_address, exc)
            return
        self.wfile.write(forward(request, self.server.origin, self.server.spec))


class InjectingProxy(socketserver.TCPServer):
    allow_reuse_address = True

    def __init__(self, listen: tuple[str, int], origin: tuple[str, int], spec: InjectionSpec):
        self.origin = origin
        self.spec = spec
        super().__init__(listen, _ProxyHandler)


def proxy_serve(listen: tuple[str, int], origin: tuple[str, int], spec: InjectionSpec) -> None:
    """Serve until interrupted; connections are handled one at a time."""
    with InjectingProxy(listen, origin, spec) as server:
        log.info("proxying %s:%d -> %s:%d", *server.server_address[:2], *origin)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
