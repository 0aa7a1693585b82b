"""
REPOSITORY Module
---------------------------------------------------------
Versioned content store with check-out locks, history, retention and a
file-level audit trail.

On-disk layout under the store root:
    objects/ab/<sha256>        content, named by hash (deduplicated)
    index/<quoted path>.jsonl  one VersionRecord per line, version order
    locks/<quoted path>.json   the active lock, if any
    collections.json           explicitly created collections
    audit.jsonl                append-only AuditEvent log

Mutations are serialized per path; distinct paths proceed concurrently.
Expired locks are reaped lazily on the next conflicting acquisition.
Retention purges bytes only; version metadata is kept forever.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import secrets
import tempfile
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator
from urllib.parse import quote, unquote

from sheetguard.errors import (
    AlreadyExists,
    BadToken,
    GoneVersion,
    InvalidPath,
    InvalidPolicy,
    Locked,
    NotFound,
    StorageFailure,
)

logger = logging.getLogger(__name__)

Clock = Callable[[], datetime]


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


class AuditAction(str, Enum):
    CHECK_IN = "CheckIn"
    CHECK_OUT = "CheckOut"
    UNLOCK = "Unlock"
    READ = "Read"
    PURGE = "Purge"
    MAKE_COLLECTION = "MakeCollection"
    APPROVAL = "Approval"


@dataclass(frozen=True)
class VersionRecord:
    path: str
    version: int
    sha256: str
    size_bytes: int
    author: str
    timestamp: datetime
    comment: str = ""
    purged: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "path": self.path,
            "version": self.version,
            "sha256": self.sha256,
            "size_bytes": self.size_bytes,
            "author": self.author,
            "timestamp": self.timestamp.isoformat(),
            "comment": self.comment,
            "purged": self.purged,
        }, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "VersionRecord":
        d = json.loads(line)
        return cls(
            path=d["path"],
            version=int(d["version"]),
            sha256=d["sha256"],
            size_bytes=int(d["size_bytes"]),
            author=d["author"],
            timestamp=datetime.fromisoformat(d["timestamp"]),
            comment=d.get("comment", ""),
            purged=bool(d.get("purged", False)),
        )


@dataclass(frozen=True)
class LockToken:
    path: str
    owner: str
    token: str
    acquired: datetime
    ttl_seconds: int

    @property
    def expires(self) -> datetime:
        return self.acquired + timedelta(seconds=self.ttl_seconds)

    def expired(self, now: datetime) -> bool:
        return now >= self.expires

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "owner": self.owner,
            "token": self.token,
            "acquired": self.acquired.isoformat(),
            "ttl_seconds": self.ttl_seconds,
        }


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    timestamp: datetime
    actor: str
    action: AuditAction
    path: str
    version: int | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp.isoformat(),
            "actor": self.actor,
            "action": self.action.value,
            "path": self.path,
            "version": self.version,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class RetentionPolicy:
    keep_last: int | None = None
    newer_than: datetime | None = None

    def validate(self) -> "RetentionPolicy":
        if (self.keep_last is None) == (self.newer_than is None):
            raise InvalidPolicy("give exactly one of keep_last or newer_than")
        if self.keep_last is not None and self.keep_last < 1:
            raise InvalidPolicy(f"keep_last must be >= 1, got {self.keep_last}")
        return self


@dataclass(frozen=True)
class IntegrityIssue:
    path: str
    version: int
    problem: str


def normalize_path(path: str, allow_root: bool = False) -> str:
    """
    Validate a repository path and return it without leading/trailing '/'.

    Raises:
        InvalidPath: '..' or '.' segments, empty segments, backslashes,
            control characters, or an empty path
    """
    if not isinstance(path, str) or "\\" in path or any(ord(ch) < 32 for ch in path):
        raise InvalidPath(f"invalid repository path: {path!r}")
    stripped = path.strip("/")
    if not stripped:
        if allow_root:
            return ""
        raise InvalidPath("empty repository path")
    segments = stripped.split("/")
    for seg in segments:
        if seg in ("", ".", ".."):
            raise InvalidPath(f"invalid repository path: {path!r}")
    return stripped


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# =====================================================================
# STORE
# =====================================================================

class RepositoryStore:
    """
    Usage:
        store = RepositoryStore("./sheetguard-store")
        rec = store.checkin("finance/revenue.xlsx", data, author="alice")
        data = store.get("finance/revenue.xlsx")
    """

    def __init__(self, root: str | Path, clock: Clock | None = None):
        self.root = Path(root)
        self.clock = clock or utc_now
        self._objects = self.root / "objects"
        self._index = self.root / "index"
        self._locks = self.root / "locks"
        self._collections_file = self.root / "collections.json"
        self._audit_file = self.root / "audit.jsonl"
        try:
            for d in (self._objects, self._index, self._locks):
                d.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageFailure(f"cannot initialize store at {self.root}: {e}") from e
        self._registry_lock = threading.Lock()
        self._path_locks: dict[str, threading.RLock] = {}
        self._objects_lock = threading.RLock()
        self._audit_lock = threading.Lock()
        self._collections_lock = threading.Lock()
        self._audit_seq = sum(1 for _ in self._read_lines(self._audit_file))

    # ------------------------------------------------------------------
    # low-level helpers
    # ------------------------------------------------------------------

    def _path_lock(self, path: str) -> threading.RLock:
        with self._registry_lock:
            return self._path_locks.setdefault(path, threading.RLock())

    def _index_file(self, path: str) -> Path:
        return self._index / (quote(path, safe="") + ".jsonl")

    def _lock_file(self, path: str) -> Path:
        return self._locks / (quote(path, safe="") + ".json")

    def _object_file(self, sha: str) -> Path:
        return self._objects / sha[:2] / sha

    @staticmethod
    def _read_lines(file: Path) -> Iterator[str]:
        if not file.exists():
            return iter(())
        with file.open("r", encoding="utf-8") as fh:
            return iter([line for line in fh.read().splitlines() if line.strip()])

    @staticmethod
    def _atomic_write(file: Path, data: bytes) -> None:
        file.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=file.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, file)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @staticmethod
    def _append_line(file: Path, line: str) -> None:
        with file.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _records(self, path: str) -> list[VersionRecord]:
        return [VersionRecord.from_json(line) for line in self._read_lines(self._index_file(path))]

    def _write_records(self, path: str, records: list[VersionRecord]) -> None:
        payload = "".join(r.to_json() + "\n" for r in records).encode("utf-8")
        self._atomic_write(self._index_file(path), payload)

    def _audit(self, actor: str, action: AuditAction, path: str, version: int | None = None, detail: str = "") -> AuditEvent:
        with self._audit_lock:
            self._audit_seq += 1
            event = AuditEvent(self._audit_seq, self.clock(), actor, action, path, version, detail)
            self._append_line(self._audit_file, json.dumps(event.to_dict(), ensure_ascii=False))
        logger.debug(f"[REPO] audit {action.value} {path} v{version} by {actor}")
        return event

    def _load_lock(self, path: str) -> LockToken | None:
        file = self._lock_file(path)
        if not file.exists():
            return None
        d = json.loads(file.read_text(encoding="utf-8"))
        return LockToken(
            path=d["path"],
            owner=d["owner"],
            token=d["token"],
            acquired=datetime.fromisoformat(d["acquired"]),
            ttl_seconds=int(d["ttl_seconds"]),
        )

    def _store_lock(self, lock: LockToken) -> None:
        self._atomic_write(self._lock_file(lock.path), json.dumps(lock.to_dict()).encode("utf-8"))

    def _drop_lock(self, path: str) -> None:
        self._lock_file(path).unlink(missing_ok=True)

    def _collections(self) -> set[str]:
        if not self._collections_file.exists():
            return set()
        return set(json.loads(self._collections_file.read_text(encoding="utf-8")))

    # ------------------------------------------------------------------
    # queries
    # ------------------------------------------------------------------

    def exists(self, path: str) -> bool:
        """True when `path` is a stored resource (not a collection)."""
        p = normalize_path(path, allow_root=True)
        return bool(p) and self._index_file(p).exists()

    def list_paths(self) -> list[str]:
        return sorted(unquote(f.name[: -len(".jsonl")]) for f in self._index.glob("*.jsonl"))

    def is_collection(self, path: str) -> bool:
        p = normalize_path(path, allow_root=True)
        if p == "" or p in self._collections():
            return True
        prefix = p + "/"
        return any(stored.startswith(prefix) for stored in self.list_paths())

    def list_children(self, path: str) -> list[tuple[str, bool]]:
        """Direct children of a collection as (name, is_collection), sorted by name."""
        p = normalize_path(path, allow_root=True)
        if not self.is_collection(p):
            raise NotFound(f"no such collection: {path}")
        prefix = p + "/" if p else ""
        children: dict[str, bool] = {}
        for candidate, is_file in [(s, True) for s in self.list_paths()] + [
            (c, False) for c in self._collections()
        ]:
            if not candidate.startswith(prefix) or candidate == p:
                continue
            rest = candidate[len(prefix):]
            head, sep, _ = rest.partition("/")
            collection = bool(sep) or not is_file
            children[head] = children.get(head, False) or collection
        return sorted(children.items())

    def history(self, path: str) -> list[VersionRecord]:
        p = normalize_path(path)
        records = self._records(p)
        if not records:
            raise NotFound(f"no such path: {p}")
        return records

    def latest(self, path: str) -> VersionRecord:
        return self.history(path)[-1]

    def active_lock(self, path: str) -> LockToken | None:
        p = normalize_path(path)
        lock = self._load_lock(p)
        if lock is None or lock.expired(self.clock()):
            return None
        return lock

    def audit_log(self) -> list[AuditEvent]:
        events = []
        for line in self._read_lines(self._audit_file):
            d = json.loads(line)
            events.append(AuditEvent(
                seq=int(d["seq"]),
                timestamp=datetime.fromisoformat(d["timestamp"]),
                actor=d["actor"],
                action=AuditAction(d["action"]),
                path=d["path"],
                version=d.get("version"),
                detail=d.get("detail", ""),
            ))
        return events

    # ------------------------------------------------------------------
    # mutations
    # ------------------------------------------------------------------

    def _check_parents(self, p: str) -> None:
        parts = p.split("/")
        for i in range(1, len(parts)):
            if self._index_file("/".join(parts[:i])).exists():
                raise InvalidPath(f"{'/'.join(parts[:i])} is a resource, not a collection")

    def checkin(
        self,
        path: str,
        data: bytes,
        author: str,
        comment: str = "",
        token: str | None = None,
    ) -> VersionRecord:
        """
        Store `data` as the next version of `path`.

        A lock held through `token` is released on success.

        Raises:
            Locked: another owner holds an unexpired lock
            InvalidPath: bad syntax, or the path names a collection
            StorageFailure: the write failed
        """
        p = normalize_path(path)
        if not self._index_file(p).exists() and self.is_collection(p):
            raise InvalidPath(f"{p} is a collection")
        self._check_parents(p)
        with self._path_lock(p):
            lock = self.active_lock(p)
            if lock is not None and lock.token != token:
                raise Locked(p, lock.owner)
            sha = sha256_hex(data)
            try:
                with self._objects_lock:
                    obj = self._object_file(sha)
                    if not obj.exists():
                        self._atomic_write(obj, data)
                    records = self._records(p)
                    record = VersionRecord(
                        path=p,
                        version=len(records) + 1,
                        sha256=sha,
                        size_bytes=len(data),
                        author=author,
                        timestamp=self.clock(),
                        comment=comment,
                    )
                    self._append_line(self._index_file(p), record.to_json())
                if lock is not None:
                    self._drop_lock(p)
            except OSError as e:
                raise StorageFailure(f"checkin of {p} failed: {e}") from e
            self._audit(author, AuditAction.CHECK_IN, p, record.version, comment)
        logger.info(f"[REPO] {p} v{record.version} checked in by {author}")
        return record

    def get(self, path: str, version: int | None = None, actor: str = "anonymous") -> bytes:
        """
        Stored bytes of a version (latest when omitted).

        Raises:
            NotFound: unknown path or version
            GoneVersion: the version's bytes were purged by retention
        """
        return self.get_version(path, version, actor)[1]

    def get_version(
        self, path: str, version: int | None = None, actor: str = "anonymous",
    ) -> tuple[VersionRecord, bytes]:
        """Like `get`, also returning the record the bytes belong to."""
        p = normalize_path(path)
        with self._path_lock(p):
            records = self.history(p)
            if version is None:
                record = records[-1]
            elif 1 <= version <= len(records):
                record = records[version - 1]
            else:
                raise NotFound(f"{p} has no version {version}")
            if record.purged:
                raise GoneVersion(f"{p} v{record.version} was purged by retention")
            try:
                data = self._object_file(record.sha256).read_bytes()
            except OSError as e:
                raise StorageFailure(f"object for {p} v{record.version} unreadable: {e}") from e
            self._audit(actor, AuditAction.READ, p, record.version)
        return record, data

    def lock(self, path: str, owner: str, ttl: int = 300) -> LockToken:
        """
        Acquire the exclusive write lock (check-out). The path need not exist yet.

        Raises:
            Locked: an unexpired lock is held
        """
        p = normalize_path(path)
        if ttl < 1:
            raise InvalidPath(f"lock ttl must be positive, got {ttl}")
        if p in self._collections():
            raise InvalidPath(f"{p} is a collection")
        with self._path_lock(p):
            now = self.clock()
            current = self._load_lock(p)
            if current is not None and not current.expired(now):
                raise Locked(p, current.owner)
            if current is not None:
                logger.debug(f"[REPO] reaping expired lock on {p} held by {current.owner}")
            token = LockToken(p, owner, secrets.token_hex(16), now, int(ttl))
            try:
                self._store_lock(token)
            except OSError as e:
                raise StorageFailure(f"cannot persist lock for {p}: {e}") from e
            self._audit(owner, AuditAction.CHECK_OUT, p, detail=f"ttl={ttl}")
        return token

    def refresh_lock(self, path: str, token: str, ttl: int = 300) -> LockToken:
        p = normalize_path(path)
        with self._path_lock(p):
            current = self.active_lock(p)
            if current is None or current.token != token:
                raise BadToken(f"no lock on {p} with that token")
            refreshed = replace(current, acquired=self.clock(), ttl_seconds=int(ttl))
            self._store_lock(refreshed)
            self._audit(current.owner, AuditAction.CHECK_OUT, p, detail=f"refresh ttl={ttl}")
        return refreshed

    def unlock(self, path: str, token: str, actor: str | None = None) -> None:
        """
        Raises:
            BadToken: no unexpired lock on the path carries `token`
        """
        p = normalize_path(path)
        with self._path_lock(p):
            current = self.active_lock(p)
            if current is None or current.token != token:
                raise BadToken(f"no lock on {p} with that token")
            self._drop_lock(p)
            self._audit(actor or current.owner, AuditAction.UNLOCK, p)

    def make_collection(self, path: str, actor: str = "anonymous") -> None:
        """
        Raises:
            AlreadyExists: a resource or collection already has this path
            NotFound: the parent collection does not exist
        """
        p = normalize_path(path)
        parent = p.rpartition("/")[0]
        with self._collections_lock:
            if self._index_file(p).exists() or self.is_collection(p):
                raise AlreadyExists(f"{p} already exists")
            if parent and not self.is_collection(parent):
                raise NotFound(f"parent collection {parent} does not exist")
            collections = self._collections() | {p}
            try:
                self._atomic_write(
                    self._collections_file,
                    json.dumps(sorted(collections)).encode("utf-8"),
                )
            except OSError as e:
                raise StorageFailure(f"cannot create collection {p}: {e}") from e
            self._audit(actor, AuditAction.MAKE_COLLECTION, p)

    def record_approval(self, path: str, version: int, actor: str, detail: str = "") -> AuditEvent:
        """Annotate a version with a workflow approval in the audit trail."""
        records = self.history(path)
        if not 1 <= version <= len(records):
            raise NotFound(f"{path} has no version {version}")
        return self._audit(actor, AuditAction.APPROVAL, records[0].path, version, detail)

    def apply_retention(self, policy: RetentionPolicy, actor: str = "retention") -> list[tuple[str, int]]:
        """
        Purge bytes of old versions; the latest version of a path is never purged.

        Returns:
            purged (path, version) pairs in path/version order
        """
        policy.validate()
        purged: list[tuple[str, int]] = []
        for p in self.list_paths():
            with self._path_lock(p), self._objects_lock:
                records = self._records(p)
                changed = False
                for i, record in enumerate(records[:-1]):
                    if record.purged:
                        continue
                    if policy.keep_last is not None:
                        doomed = record.version <= len(records) - policy.keep_last
                    else:
                        doomed = record.timestamp < policy.newer_than
                    if doomed:
                        records[i] = replace(record, purged=True)
                        purged.append((p, record.version))
                        changed = True
                if changed:
                    try:
                        self._write_records(p, records)
                    except OSError as e:
                        raise StorageFailure(f"retention rewrite of {p} failed: {e}") from e
        if purged:
            with self._objects_lock:
                live = {
                    r.sha256 for p in self.list_paths() for r in self._records(p) if not r.purged
                }
                dead = {
                    r.sha256 for p, v in purged for r in [self._records(p)[v - 1]]
                } - live
                for sha in dead:
                    self._object_file(sha).unlink(missing_ok=True)
            for p, v in purged:
                self._audit(actor, AuditAction.PURGE, p, v)
        logger.info(f"[REPO] retention purged {len(purged)} versions")
        return purged

    def verify_integrity(self) -> list[IntegrityIssue]:
        """Re-hash every retained object; report missing or mismatched content."""
        issues = []
        for p in self.list_paths():
            for record in self._records(p):
                if record.purged:
                    continue
                obj = self._object_file(record.sha256)
                if not obj.exists():
                    issues.append(IntegrityIssue(p, record.version, "object missing"))
                elif sha256_hex(obj.read_bytes()) != record.sha256:
                    issues.append(IntegrityIssue(p, record.version, "hash mismatch"))
        return issues


class LocalRepositoryClient:
    """Repository client over an in-process store (used by migration)."""

    def __init__(self, store: RepositoryStore):
        self.store = store

    def ping(self) -> None:
        if not self.store.root.is_dir():
            raise StorageFailure(f"store root {self.store.root} is gone")

    def checkin(self, path: str, data: bytes, author: str, comment: str = "") -> int:
        return self.store.checkin(path, data, author, comment).version

    def get(self, path: str, version: int | None = None) -> bytes:
        return self.store.get(path, version)
