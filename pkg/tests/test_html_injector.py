import socket
import socketserver
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowcorr.html_injector import (
    BAD_GATEWAY,
    HttpMessageView,
    HttpParseError,
    InjectingProxy,
    InjectionSpec,
    forward,
    inject_asset,
    parse_message,
    strip_cache_headers,
    transform_response,
)

WELCOME = b"<html>\n<head>\n</head>\n<body>\nWelcome home!!!\n</body>\n</html>\n"
WELCOME_INJECTED = (
    b"<html>\n<head>\n</head>\n<body>\nWelcome home!!!\n"
    b'<img src="link_to_large_file" width="1px" /></body>\n</html>\n'
)
SPEC = InjectionSpec("link_to_large_file")


def html_response(body, ctype=b"text/html; charset=utf-8", extra=()):
    headers = ((b"Content-Type", ctype), (b"Content-Length", str(len(body)).encode()), *extra)
    return HttpMessageView(b"HTTP/1.1 200 OK", headers, body)


def test_welcome_page_golden():
    assert SPEC.tag == b'<img src="link_to_large_file" width="1px" />'
    assert inject_asset(WELCOME, SPEC) == (WELCOME_INJECTED, True)


def test_no_match_and_case_and_last_occurrence():
    assert inject_asset(b"<p>plain</p>", SPEC) == (b"<p>plain</p>", False)
    out, matched = inject_asset(b"<BODY>x</BODY>", SPEC)
    assert matched and out == b'<BODY>x<img src="link_to_large_file" width="1px" /></BODY>'
    out, _ = inject_asset(b"a</body>b</body>c", SPEC)
    assert out == b'a</body>b<img src="link_to_large_file" width="1px" /></body>c'
    twice, _ = inject_asset(out, SPEC)
    assert twice.count(SPEC.tag) == 2


def test_spec_validation():
    with pytest.raises(ValueError):
        InjectionSpec("")
    with pytest.raises(ValueError):
        InjectionSpec("x", match_tag=b"")
    assert InjectionSpec("a.jpg", width_attr="0").tag == b'<img src="a.jpg" width="0" />'


def test_strip_cache_headers():
    req = HttpMessageView(
        b"GET / HTTP/1.1",
        ((b"Host", b"h"), (b"If-None-Match", b'"x"'), (b"Accept", b"*/*"), (b"if-modified-since", b"d")),
    )
    assert strip_cache_headers(req).headers == ((b"Host", b"h"), (b"Accept", b"*/*"))
    plain = HttpMessageView(b"GET / HTTP/1.1", ((b"Host", b"h"),))
    assert strip_cache_headers(plain) == plain


def test_content_length_recomputed():
    url = "http://x.io/a.jpg"
    url += "g" * (18 - len(url))
    assert len(url) == 18
    body = b"<html><body>" + b"x" * 81 + b"</body>"
    assert len(body) == 100
    out = transform_response(html_response(body), InjectionSpec(url))
    assert out.header(b"content-length") == b"144"
    assert len(out.body) == 144


def test_passthrough_cases():
    image = html_response(b"\xff\xd8</body>", ctype=b"image/jpeg")
    assert transform_response(image, SPEC) is image
    nomatch = html_response(b"<p>hi</p>")
    assert transform_response(nomatch, SPEC).to_bytes() == nomatch.to_bytes()
    gz = html_response(b"</body>", extra=((b"Content-Encoding", b"gzip"),))
    assert transform_response(gz, SPEC) is gz
    chunked = HttpMessageView(
        b"HTTP/1.1 200 OK", ((b"Content-Type", b"text/html"), (b"Transfer-Encoding", b"chunked")), b"</body>"
    )
    assert transform_response(chunked, SPEC) is chunked


def test_target_hosts():
    spec = InjectionSpec("a", target_hosts=("Example.org",))
    resp = html_response(b"</body>")
    assert transform_response(resp, spec, "example.org:8080").body != resp.body
    assert transform_response(resp, spec, "other.org") is resp
    assert transform_response(resp, spec, None) is resp


def test_parse_round_trip():
    raw = b"HTTP/1.1 200 OK\r\nContent-Type: text/html\r\nX-A: 1\r\n\r\n<body></body>"
    view = parse_message(raw)
    assert view.to_bytes() == raw
    assert view.header(b"x-a") == b"1"
    with pytest.raises(HttpParseError):
        parse_message(b"HTTP/1.1 200 OK\r\n")
    with pytest.raises(HttpParseError):
        parse_message(b"HTTP/1.1 200 OK\r\nbroken\r\n\r\n")


@given(st.binary(max_size=300), st.booleans(), st.text(st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=40))
def test_length_invariant(body, add_tag, url):
    if add_tag:
        body += b"</body>"
    spec = InjectionSpec(url)
    resp = html_response(body)
    out = transform_response(resp, spec)
    assert int(out.header(b"content-length")) == len(out.body)
    expected = len(body) + len(spec.tag) if b"</body>" in body.lower() else len(body)
    assert len(out.body) == expected


# -- live proxy against a stub origin ------------------------------------------


class _Origin(socketserver.StreamRequestHandler):
    def handle(self):
        head = b""
        while not head.endswith(b"\r\n\r\n"):
            line = self.rfile.readline()
            if not line:
                return
            head += line
        view = parse_message(head)
        length = int(view.header(b"content-length") or 0)
        body = self.rfile.read(length)
        self.server.seen.append(head + body)
        if view.start_line.startswith(b"POST"):
            payload, ctype = b'{"ok": true}', b"application/json"
        else:
            payload, ctype = WELCOME, b"text/html"
        self.wfile.write(
            b"HTTP/1.1 200 OK\r\nContent-Type: " + ctype
            + b"\r\nContent-Length: " + str(len(payload)).encode() + b"\r\n\r\n" + payload
        )


@pytest.fixture
def stack():
    origin = socketserver.TCPServer(("127.0.0.1", 0), _Origin)
    origin.seen = []
    proxy = InjectingProxy(("127.0.0.1", 0), origin.server_address, SPEC)
    threads = [threading.Thread(target=s.serve_forever, daemon=True) for s in (origin, proxy)]
    for t in threads:
        t.start()
    yield proxy.server_address, origin
    for s in (origin, proxy):
        s.shutdown()
        s.server_close()


def request(addr, raw):
    with socket.create_connection(addr, timeout=5) as sock:
        sock.sendall(raw)
        chunks = []
        while chunk := sock.recv(65536):
            chunks.append(chunk)
    return parse_message(b"".join(chunks))


def test_proxy_get_is_injected(stack):
    addr, origin = stack
    resp = request(addr, b"GET / HTTP/1.1\r\nHost: site\r\nIf-None-Match: \"v1\"\r\n\r\n")
    assert resp.body == WELCOME_INJECTED
    assert resp.header(b"content-length") == str(len(WELCOME_INJECTED)).encode()
    assert b"If-None-Match" not in origin.seen[0]


def test_proxy_post_passthrough(stack):
    addr, origin = stack
    body = b"a=1&b=2"
    raw = (
        b"POST /form HTTP/1.1\r\nHost: site\r\nX-Keep: yes\r\nIf-Modified-Since: then\r\n"
        b"Content-Length: 7\r\n\r\n" + body
    )
    resp = request(addr, raw)
    assert resp.body == b'{"ok": true}'
    sent = parse_message(origin.seen[0])
    assert sent.body == body
    assert sent.header(b"x-keep") == b"yes"
    assert sent.header(b"if-modified-since") is None


def test_origin_down_gives_502():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        dead = s.getsockname()
    req = HttpMessageView(b"GET / HTTP/1.1", ((b"Host", b"x"),))
    out = forward(req, dead, SPEC, timeout=1)
    assert out == BAD_GATEWAY
    assert parse_message(out).start_line.split()[1] == b"502"
