"""
DAVCLIENT Module
---------------------------------------------------------
Repository client over HTTP(S) WebDAV, used when migration checks
workbooks in to a remote SheetGuard server.
"""

from __future__ import annotations

import logging
from urllib.parse import quote

import requests

from sheetguard.errors import (
    BadToken,
    GoneVersion,
    InvalidPath,
    Locked,
    NotFound,
    RepositoryUnreachable,
    StorageFailure,
)
from sheetguard.repository import normalize_path

logger = logging.getLogger(__name__)

VERSION_HEADER = "X-SheetGuard-Version"


class DavRepositoryClient:
    def __init__(
        self,
        base_url: str,
        auth: tuple[str, str] | None = None,
        session: requests.Session | None = None,
        timeout: float = 30.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.session = session or requests.Session()
        if auth is not None:
            self.session.auth = auth
        self.timeout = timeout

    def _url(self, path: str, collection: bool = False) -> str:
        url = f"{self.base_url}/{quote(path)}"
        return url + "/" if collection else url

    def _send(self, method: str, url: str, **kwargs) -> requests.Response:
        try:
            return self.session.request(method, url, timeout=self.timeout, **kwargs)
        except requests.RequestException as e:
            raise RepositoryUnreachable(f"{method} {url} failed: {e}") from e

    @staticmethod
    def _raise_for(resp: requests.Response, path: str) -> None:
        status = resp.status_code
        if status < 400:
            return
        detail = resp.text.strip() or resp.reason
        if status == 423:
            raise Locked(path)
        if status == 404:
            raise NotFound(detail)
        if status == 410:
            raise GoneVersion(detail)
        if status == 403:
            raise BadToken(detail)
        if status in (400, 409):
            raise InvalidPath(detail)
        if status == 401:
            raise RepositoryUnreachable(f"authentication failed for {path}")
        raise StorageFailure(f"server answered {status} for {path}: {detail}")

    def ping(self) -> None:
        resp = self._send("OPTIONS", self.base_url + "/")
        if resp.status_code != 200 or "1" not in resp.headers.get("DAV", ""):
            raise RepositoryUnreachable(f"{self.base_url} is not a WebDAV server (status {resp.status_code})")

    def ensure_collections(self, path: str) -> None:
        parts = normalize_path(path).split("/")[:-1]
        for i in range(1, len(parts) + 1):
            prefix = "/".join(parts[:i])
            resp = self._send("MKCOL", self._url(prefix, collection=True))
            # 405: already there
            if resp.status_code not in (201, 405):
                self._raise_for(resp, prefix)

    def checkin(self, path: str, data: bytes, author: str = "", comment: str = "", token: str | None = None) -> int:
        """PUT the bytes; returns the new version number. `author` is the authenticated user."""
        p = normalize_path(path)
        self.ensure_collections(p)
        headers = {"Content-Type": "application/octet-stream"}
        if token:
            headers["If"] = f"(<opaquelocktoken:{token}>)"
        resp = self._send("PUT", self._url(p), data=data, headers=headers)
        self._raise_for(resp, p)
        version = int(resp.headers.get(VERSION_HEADER, "0"))
        logger.info(f"[REPO] PUT {p} -> v{version} ({resp.status_code})")
        return version

    def get(self, path: str, version: int | None = None) -> bytes:
        p = normalize_path(path)
        params = {"version": str(version)} if version is not None else None
        resp = self._send("GET", self._url(p), params=params)
        self._raise_for(resp, p)
        return resp.content

    def lock(self, path: str, ttl: int = 300) -> str:
        p = normalize_path(path)
        body = (
            '<?xml version="1.0" encoding="utf-8"?>'
            '<D:lockinfo xmlns:D="DAV:"><D:lockscope><D:exclusive/></D:lockscope>'
            "<D:locktype><D:write/></D:locktype></D:lockinfo>"
        )
        resp = self._send("LOCK", self._url(p), data=body.encode("utf-8"),
                          headers={"Timeout": f"Second-{ttl}", "Content-Type": "application/xml"})
        self._raise_for(resp, p)
        return resp.headers["Lock-Token"].strip("<>").removeprefix("opaquelocktoken:")

    def unlock(self, path: str, token: str) -> None:
        p = normalize_path(path)
        resp = self._send("UNLOCK", self._url(p), headers={"Lock-Token": f"<opaquelocktoken:{token}>"})
        self._raise_for(resp, p)
