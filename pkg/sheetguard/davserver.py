"""
DAVSERVER Module
---------------------------------------------------------
WebDAV (class 1 and 2 subset) front end for the repository store, so
spreadsheet clients can open, check out, save and re-resolve links
against repository URLs.

Supported: OPTIONS, GET/HEAD (`?version=n` for history), PUT, MKCOL,
PROPFIND (Depth 0/1), LOCK, UNLOCK. DELETE, PROPPATCH, COPY and MOVE
answer 405; retention owns deletion.

Served by wsgiref with one thread per request; the store serializes
per-path work.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import logging
import re
from dataclasses import dataclass, field
from email.utils import format_datetime
from socketserver import ThreadingMixIn
from typing import Mapping
from urllib.parse import parse_qs, quote, unquote
from wsgiref.simple_server import WSGIRequestHandler, WSGIServer, make_server as _wsgi_make_server

from defusedxml.ElementTree import fromstring as xmlparse
from lxml import etree

from config.settings import (
    DAV_PROPS_NAMESPACE,
    DAV_REALM,
    DEFAULT_LOCK_TTL_SECONDS,
    MAX_LOCK_TTL_SECONDS,
)
from sheetguard.errors import (
    AlreadyExists,
    BadToken,
    GoneVersion,
    InvalidPath,
    Locked,
    NotFound,
    RepositoryError,
    StorageFailure,
)
from sheetguard.repository import LockToken, RepositoryStore, normalize_path

logger = logging.getLogger(__name__)

DAV_NS = "DAV:"
NSMAP = {"D": DAV_NS, "sg": DAV_PROPS_NAMESPACE}
ALLOWED_METHODS = ("OPTIONS", "GET", "HEAD", "PUT", "MKCOL", "PROPFIND", "LOCK", "UNLOCK")
REFUSED_METHODS = ("DELETE", "PROPPATCH", "COPY", "MOVE")
LOCK_TOKEN_PREFIX = "opaquelocktoken:"
VERSION_HEADER = "X-SheetGuard-Version"

STATUS_FOR_ERROR: dict[type[RepositoryError], int] = {
    Locked: 423,
    NotFound: 404,
    GoneVersion: 410,
    InvalidPath: 400,
    BadToken: 403,
    StorageFailure: 500,
    AlreadyExists: 405,
}

REASONS = {
    200: "OK", 201: "Created", 204: "No Content", 207: "Multi-Status",
    400: "Bad Request", 401: "Unauthorized", 403: "Forbidden", 404: "Not Found",
    405: "Method Not Allowed", 409: "Conflict", 410: "Gone",
    415: "Unsupported Media Type", 423: "Locked", 500: "Internal Server Error",
    501: "Not Implemented",
}

_TOKEN_RE = re.compile(r"<([^>]+)>")
_TIMEOUT_RE = re.compile(r"Second-(\d+)", re.IGNORECASE)


@dataclass
class DavResponse:
    status: int
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""

    def header(self, name: str) -> str | None:
        for k, v in self.headers:
            if k.lower() == name.lower():
                return v
        return None


def status_for(error: RepositoryError) -> int:
    for cls in type(error).__mro__:
        if cls in STATUS_FOR_ERROR:
            return STATUS_FOR_ERROR[cls]
    return 500


def _text(status: int, message: str = "", headers: list[tuple[str, str]] | None = None) -> DavResponse:
    body = (message or REASONS.get(status, "")).encode("utf-8") + b"\n"
    return DavResponse(status, [("Content-Type", "text/plain; charset=utf-8"), *(headers or [])], body)


def _xml(status: int, root: etree._Element, headers: list[tuple[str, str]] | None = None) -> DavResponse:
    body = etree.tostring(root, xml_declaration=True, encoding="utf-8")
    return DavResponse(status, [("Content-Type", 'application/xml; charset="utf-8"'), *(headers or [])], body)


def _d(tag: str) -> str:
    return f"{{{DAV_NS}}}{tag}"


def _sg(tag: str) -> str:
    return f"{{{DAV_PROPS_NAMESPACE}}}{tag}"


def _href(path: str, collection: bool) -> str:
    href = "/" + quote(path)
    if collection and not href.endswith("/"):
        href += "/"
    return href


def _lock_tokens(header: str | None) -> list[str]:
    """Lock tokens from an If or Lock-Token header; tagged resource URLs are skipped."""
    return [
        raw[len(LOCK_TOKEN_PREFIX):]
        for raw in _TOKEN_RE.findall(header or "")
        if raw.startswith(LOCK_TOKEN_PREFIX)
    ]


def _lock_ttl(header: str | None) -> int:
    m = _TIMEOUT_RE.search(header or "")
    if not m:
        return DEFAULT_LOCK_TTL_SECONDS
    return max(1, min(int(m.group(1)), MAX_LOCK_TTL_SECONDS))


def check_password(users: Mapping[str, str], user: str, password: str) -> bool:
    """Stored entries are plain passwords or `sha256:<hex>` digests."""
    expected = users.get(user)
    if expected is None:
        return False
    if expected.startswith("sha256:"):
        digest = hashlib.sha256(password.encode("utf-8")).hexdigest()
        return hmac.compare_digest(digest, expected[len("sha256:"):].lower())
    return hmac.compare_digest(password.encode("utf-8"), expected.encode("utf-8"))


def basic_auth_user(users: Mapping[str, str], authorization: str | None) -> str | None:
    if not authorization or not authorization.lower().startswith("basic "):
        return None
    try:
        decoded = base64.b64decode(authorization[6:].strip(), validate=True).decode("utf-8")
    except (ValueError, UnicodeDecodeError):
        return None
    user, sep, password = decoded.partition(":")
    if not sep or not check_password(users, user, password):
        return None
    return user


# =====================================================================
# REQUEST HANDLING
# =====================================================================

class DavHandler:
    """Stateless between requests; all state lives in the store."""

    def __init__(self, store: RepositoryStore, users: Mapping[str, str] | None = None):
        self.store = store
        self.users = dict(users or {})

    def handle_request(
        self,
        method: str,
        path: str,
        headers: Mapping[str, str] | None = None,
        body: bytes = b"",
        authenticated_user: str | None = None,
    ) -> DavResponse:
        method = method.upper()
        hdrs = {k.lower(): v for k, v in (headers or {}).items()}
        raw_path, _, query = path.partition("?")
        if self.users and authenticated_user is None:
            return _text(401, headers=[("WWW-Authenticate", f'Basic realm="{DAV_REALM}"')])
        user = authenticated_user or "anonymous"

        if method in REFUSED_METHODS:
            return _text(405, f"{method} is not supported", [("Allow", ", ".join(ALLOWED_METHODS))])
        handler = getattr(self, f"_do_{method.lower()}", None)
        if method not in ALLOWED_METHODS or handler is None:
            return _text(501, f"{method} is not implemented")
        try:
            rel = normalize_path(unquote(raw_path), allow_root=True)
            response = handler(rel, hdrs, body, user, parse_qs(query))
        except RepositoryError as e:
            response = _text(status_for(e), str(e))
        logger.debug(f"[DAV] {user} {method} /{raw_path.lstrip('/')} -> {response.status}")
        return response

    # --- OPTIONS ----------------------------------------------------------

    def _do_options(self, path, hdrs, body, user, query) -> DavResponse:
        return DavResponse(200, [
            ("DAV", "1, 2"),
            ("Allow", ", ".join(ALLOWED_METHODS)),
            ("MS-Author-Via", "DAV"),
            ("Content-Length", "0"),
        ])

    # --- GET / HEAD -------------------------------------------------------

    def _do_get(self, path, hdrs, body, user, query) -> DavResponse:
        if self.store.is_collection(path) and not self.store.exists(path):
            children = self.store.list_children(path)
            listing = "".join(f"{name}{'/' if coll else ''}\n" for name, coll in children)
            return DavResponse(200, [("Content-Type", "text/plain; charset=utf-8")], listing.encode("utf-8"))
        version = None
        if "version" in query:
            try:
                version = int(query["version"][0])
            except ValueError:
                return _text(400, "version must be an integer")
        record, data = self.store.get_version(path, version, actor=user)
        return DavResponse(200, [
            ("Content-Type", "application/octet-stream"),
            ("ETag", f'"{record.sha256}"'),
            ("Last-Modified", format_datetime(record.timestamp, usegmt=True)),
            (VERSION_HEADER, str(record.version)),
        ], data)

    def _do_head(self, path, hdrs, body, user, query) -> DavResponse:
        response = self._do_get(path, hdrs, body, user, query)
        response.headers.append(("Content-Length", str(len(response.body))))
        response.body = b""
        return response

    # --- PUT / MKCOL ------------------------------------------------------

    def _do_put(self, path, hdrs, body, user, query) -> DavResponse:
        if not path:
            return _text(405, "cannot PUT to the root collection")
        if self.store.is_collection(path) and not self.store.exists(path):
            return _text(405, f"{path} is a collection")
        parent = path.rpartition("/")[0]
        if parent and (self.store.exists(parent) or not self.store.is_collection(parent)):
            return _text(409, f"parent collection {parent} does not exist")
        existed = self.store.exists(path)
        tokens = _lock_tokens(hdrs.get("if"))
        record = self.store.checkin(
            path, body, user, comment="WebDAV PUT", token=tokens[0] if tokens else None,
        )
        return DavResponse(201 if not existed else 204, [
            ("ETag", f'"{record.sha256}"'),
            (VERSION_HEADER, str(record.version)),
            ("Content-Length", "0"),
        ])

    def _do_mkcol(self, path, hdrs, body, user, query) -> DavResponse:
        if body:
            return _text(415, "MKCOL request bodies are not supported")
        if not path or self.store.exists(path) or self.store.is_collection(path):
            return _text(405, f"/{path} already exists")
        try:
            self.store.make_collection(path, actor=user)
        except NotFound as e:
            return _text(409, str(e))
        return DavResponse(201, [("Content-Length", "0")])

    # --- PROPFIND ---------------------------------------------------------

    def _requested_props(self, body: bytes) -> list[str] | None:
        """Clark names asked for, or None for allprop."""
        if not body.strip():
            return None
        root = xmlparse(body)
        if root.find(_d("allprop")) is not None or root.find(_d("propname")) is not None:
            return None
        prop = root.find(_d("prop"))
        if prop is None:
            return None
        return [child.tag for child in prop]

    def _properties(self, path: str, collection: bool) -> dict[str, object]:
        name = path.rpartition("/")[2] or "/"
        props: dict[str, object] = {_d("displayname"): name, _d("resourcetype"): collection}
        if not collection:
            history = self.store.history(path)
            latest = history[-1]
            props.update({
                _d("getcontentlength"): str(latest.size_bytes),
                _d("getlastmodified"): format_datetime(latest.timestamp, usegmt=True),
                _d("getetag"): f'"{latest.sha256}"',
                _d("getcontenttype"): "application/octet-stream",
                _sg("version-count"): str(len(history)),
                _sg("sha256"): latest.sha256,
            })
            lock = self.store.active_lock(path)
            if lock is not None:
                props[_d("lockdiscovery")] = lock
        return props

    def _response(self, path: str, collection: bool, wanted: list[str] | None) -> etree._Element:
        available = self._properties(path, collection)
        resp = etree.Element(_d("response"), nsmap=NSMAP)
        etree.SubElement(resp, _d("href")).text = _href(path, collection)
        names = list(available) if wanted is None else wanted
        found = [n for n in names if n in available]
        missing = [n for n in names if n not in available]
        for group, status in ((found, 200), (missing, 404)):
            if not group:
                continue
            propstat = etree.SubElement(resp, _d("propstat"))
            prop = etree.SubElement(propstat, _d("prop"))
            for name in group:
                el = etree.SubElement(prop, name)
                value = available.get(name)
                if name == _d("resourcetype"):
                    if value:
                        etree.SubElement(el, _d("collection"))
                elif isinstance(value, LockToken):
                    el.append(self._active_lock(value))
                elif value is not None:
                    el.text = str(value)
            etree.SubElement(propstat, _d("status")).text = f"HTTP/1.1 {status} {REASONS[status]}"
        return resp

    def _do_propfind(self, path, hdrs, body, user, query) -> DavResponse:
        depth = hdrs.get("depth", "1").strip().lower()
        if depth == "infinity":
            return _text(403, "Depth: infinity is not supported")
        if depth not in ("0", "1"):
            return _text(400, f"bad Depth header: {depth}")
        try:
            wanted = self._requested_props(body)
        except Exception as e:  # defusedxml raises several unrelated types
            return _text(400, f"malformed PROPFIND body: {e}")

        is_file = bool(path) and self.store.exists(path)
        if not is_file and not self.store.is_collection(path):
            raise NotFound(f"no such resource: /{path}")
        root = etree.Element(_d("multistatus"), nsmap=NSMAP)
        root.append(self._response(path, not is_file, wanted))
        if depth == "1" and not is_file:
            for name, coll in self.store.list_children(path):
                child = f"{path}/{name}" if path else name
                root.append(self._response(child, coll, wanted))
        return _xml(207, root)

    # --- LOCK / UNLOCK ----------------------------------------------------

    def _active_lock(self, lock: LockToken) -> etree._Element:
        active = etree.Element(_d("activelock"), nsmap=NSMAP)
        etree.SubElement(etree.SubElement(active, _d("locktype")), _d("write"))
        etree.SubElement(etree.SubElement(active, _d("lockscope")), _d("exclusive"))
        etree.SubElement(active, _d("depth")).text = "0"
        etree.SubElement(active, _d("owner")).text = lock.owner
        etree.SubElement(active, _d("timeout")).text = f"Second-{lock.ttl_seconds}"
        token = etree.SubElement(active, _d("locktoken"))
        etree.SubElement(token, _d("href")).text = LOCK_TOKEN_PREFIX + lock.token
        root = etree.SubElement(active, _d("lockroot"))
        etree.SubElement(root, _d("href")).text = _href(lock.path, False)
        return active

    def _do_lock(self, path, hdrs, body, user, query) -> DavResponse:
        if not path:
            return _text(405, "cannot lock the root collection")
        ttl = _lock_ttl(hdrs.get("timeout"))
        tokens = _lock_tokens(hdrs.get("if"))
        if not body.strip() and tokens:
            lock = self.store.refresh_lock(path, tokens[0], ttl)
        else:
            if body.strip():
                try:
                    xmlparse(body)
                except Exception as e:
                    return _text(400, f"malformed LOCK body: {e}")
            lock = self.store.lock(path, user, ttl)
        root = etree.Element(_d("prop"), nsmap=NSMAP)
        etree.SubElement(root, _d("lockdiscovery")).append(self._active_lock(lock))
        return _xml(200, root, [("Lock-Token", f"<{LOCK_TOKEN_PREFIX}{lock.token}>")])

    def _do_unlock(self, path, hdrs, body, user, query) -> DavResponse:
        tokens = _lock_tokens(hdrs.get("lock-token"))
        if not tokens:
            return _text(403, "UNLOCK needs a matching Lock-Token")
        self.store.unlock(path, tokens[0], actor=user)
        return DavResponse(204, [("Content-Length", "0")])


# =====================================================================
# WSGI SERVER
# =====================================================================

class DavApp:
    """WSGI application wrapping a DavHandler with HTTP Basic auth."""

    def __init__(self, handler: DavHandler):
        self.handler = handler

    def __call__(self, environ, start_response):
        method = environ["REQUEST_METHOD"]
        # PEP 3333 delivers the path decoded as latin-1
        path = environ.get("PATH_INFO", "/").encode("iso-8859-1").decode("utf-8", errors="replace")
        if environ.get("QUERY_STRING"):
            path += "?" + environ["QUERY_STRING"]
        headers = {
            key[5:].replace("_", "-").title(): value
            for key, value in environ.items()
            if key.startswith("HTTP_")
        }
        if environ.get("CONTENT_TYPE"):
            headers["Content-Type"] = environ["CONTENT_TYPE"]
        try:
            length = int(environ.get("CONTENT_LENGTH") or 0)
        except ValueError:
            length = 0
        body = environ["wsgi.input"].read(length) if length > 0 else b""

        user = None
        if self.handler.users:
            user = basic_auth_user(self.handler.users, environ.get("HTTP_AUTHORIZATION"))
        response = self.handler.handle_request(method, path, headers, body, user)

        out_headers = list(response.headers)
        if response.header("Content-Length") is None:
            out_headers.append(("Content-Length", str(len(response.body))))
        start_response(f"{response.status} {REASONS.get(response.status, 'Unknown')}", out_headers)
        return [response.body]


class ThreadingWSGIServer(ThreadingMixIn, WSGIServer):
    daemon_threads = True


class QuietRequestHandler(WSGIRequestHandler):
    def log_message(self, format, *args):
        logger.debug(f"[DAV] {self.address_string()} {format % args}")


def make_server(
    store: RepositoryStore,
    host: str = "127.0.0.1",
    port: int = 8080,
    users: Mapping[str, str] | None = None,
) -> ThreadingWSGIServer:
    """Bound, not yet serving. Port 0 picks an ephemeral port."""
    app = DavApp(DavHandler(store, users))
    return _wsgi_make_server(
        host.strip("[]"), port, app,
        server_class=ThreadingWSGIServer,
        handler_class=QuietRequestHandler,
    )


def serve(store: RepositoryStore, host: str, port: int, users: Mapping[str, str] | None = None) -> None:
    server = make_server(store, host, port, users)
    auth = "basic auth" if users else "no auth"
    logger.info(f"[DAV] serving {store.root} on http://{host}:{server.server_port}/ ({auth})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("[DAV] interrupted, shutting down")
    finally:
        server.server_close()
