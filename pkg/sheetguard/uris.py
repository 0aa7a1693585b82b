"""
URI helpers shared by ooxml-io, link-graph and migration.

Link targets are compared in a normalized form: backslashes become
slashes, percent-escapes in the path are decoded, scheme and host are
lower-cased, path case is kept. '%', '#' and '?' stay escaped in the
path so the form can be split and normalized again without change.
Windows drive paths and UNC shares become file URIs. The canonical form
used as a graph key is the normalized absolute URI with '.' and '..'
segments collapsed.
"""

from __future__ import annotations

import posixpath
import re
from pathlib import Path
from urllib.parse import quote, unquote, urljoin, urlsplit, urlunsplit

_DRIVE_RE = re.compile(r"^[A-Za-z]:/")
_DRIVE_PATH_RE = re.compile(r"^/[A-Za-z]:(/|$)")
_RESERVED = str.maketrans({"%": "%25", "#": "%23", "?": "%3F"})


def _decode_path(path: str) -> str:
    return unquote(path).translate(_RESERVED)


def normalize_target(raw: str) -> str:
    text = raw.strip().replace("\\", "/")
    if text.startswith("//"):
        text = "file:" + text
    elif _DRIVE_RE.match(text):
        text = "file:///" + text
    elif text.startswith("/"):
        text = "file://" + text
    parts = urlsplit(text)
    if not parts.scheme or len(parts.scheme) == 1:
        path = text[:len(parts.scheme) + 1] + parts.path if parts.scheme else parts.path
        return urlunsplit(("", "", _decode_path(path), parts.query, parts.fragment))
    return urlunsplit((
        parts.scheme.lower(),
        parts.netloc.lower(),
        _decode_path(parts.path),
        parts.query,
        parts.fragment,
    ))


def is_absolute(uri: str) -> bool:
    scheme = urlsplit(uri).scheme
    return len(scheme) > 1


def canonical_uri(uri: str) -> str:
    norm = normalize_target(uri)
    if not is_absolute(norm):
        return norm
    parts = urlsplit(norm)
    path = parts.path
    if path:
        collapsed = posixpath.normpath(path)
        # normpath keeps a leading '//' pair
        path = "/" + collapsed.lstrip("/") if path.startswith("/") else collapsed
    return urlunsplit((parts.scheme, parts.netloc, path, parts.query, parts.fragment))


def resolve_target(raw_target: str, owner_uri: str) -> str:
    """Resolve a stored link target against the workbook that holds it."""
    target = normalize_target(raw_target)
    if is_absolute(target):
        return canonical_uri(target)
    return canonical_uri(urljoin(canonical_uri(owner_uri), target))


def path_to_uri(path: str | Path) -> str:
    return canonical_uri(Path(path).resolve().as_uri())


def uri_to_path(uri: str) -> Path | None:
    """Local filesystem path for a file URI, None for other schemes."""
    parts = urlsplit(canonical_uri(uri))
    if parts.scheme != "file":
        return None
    path = unquote(parts.path)
    if parts.netloc and parts.netloc != "localhost":
        return Path(f"//{parts.netloc}{path}")
    if _DRIVE_PATH_RE.match(path):
        path = path[1:]
    return Path(path)


def uri_basename(uri: str) -> str:
    return unquote(posixpath.basename(urlsplit(uri).path.rstrip("/"))) or uri


def join_url(base_url: str, rel_path: str) -> str:
    """base + '/' + percent-encoded repository path."""
    return base_url.rstrip("/") + "/" + quote(rel_path.lstrip("/"), safe="/")
