"""
MIGRATION Module
---------------------------------------------------------
Moves selected workbooks from desktops and shared drives into the
repository, rewriting their external links to the new repository URLs.

  1. plan_migration  - destination paths, closure warnings
  2. remap_target    - old link target -> repository URL (or untouched)
  3. execute         - read, hash, rewrite, check in, log; precedents first

Sources are never deleted: migration is copy + rewrite. Links onto
workbooks outside the plan are left untouched and reported as warnings.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import posixpath
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Callable, Iterable, Protocol, Sequence
from urllib.parse import unquote, urlsplit

import networkx as nx
import pandas as pd

from sheetguard.errors import (
    EmptySelection,
    MigrationError,
    PackageError,
    RepositoryUnreachable,
    SheetGuardError,
)
from sheetguard.linkgraph import DependencyGraph, read_file_uri
from sheetguard.ooxml import list_link_targets, rewrite_links
from sheetguard.uris import (
    canonical_uri,
    is_absolute,
    join_url,
    normalize_target,
    path_to_uri,
    resolve_target,
    uri_basename,
)

logger = logging.getLogger(__name__)


class RepositoryClient(Protocol):
    def ping(self) -> None: ...

    def checkin(self, path: str, data: bytes, author: str, comment: str = "") -> int: ...


class LayoutKind(str, Enum):
    FLATTEN = "Flatten"
    PRESERVE_TREE = "PreserveTree"


@dataclass(frozen=True)
class Layout:
    kind: LayoutKind = LayoutKind.FLATTEN
    root: str | None = None  # canonical URI of the tree root for PreserveTree

    @classmethod
    def flatten(cls) -> "Layout":
        return cls(LayoutKind.FLATTEN)

    @classmethod
    def preserve_tree(cls, root: str) -> "Layout":
        text = root.strip()
        if is_absolute(normalize_target(text)):
            uri = canonical_uri(text)
        else:
            uri = path_to_uri(text)
        return cls(LayoutKind.PRESERVE_TREE, uri)


@dataclass(frozen=True)
class PlanEntry:
    source_uri: str
    dest_path: str


@dataclass(frozen=True)
class MigrationPlan:
    base_url: str
    entries: tuple[PlanEntry, ...]
    layout: Layout = field(default_factory=Layout)
    warnings: tuple[str, ...] = ()

    def dest_for(self, source_uri: str) -> str | None:
        for entry in self.entries:
            if entry.source_uri == source_uri:
                return entry.dest_path
        return None

    def dest_url(self, entry: PlanEntry) -> str:
        return join_url(self.base_url, entry.dest_path)

    @property
    def sources(self) -> set[str]:
        return {e.source_uri for e in self.entries}

    def to_json(self) -> str:
        doc = {
            "base_url": self.base_url,
            "layout": {"kind": self.layout.kind.value, "root": self.layout.root},
            "entries": [{"source_uri": e.source_uri, "dest_path": e.dest_path} for e in self.entries],
            "warnings": list(self.warnings),
        }
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MigrationPlan":
        try:
            doc = json.loads(text)
            layout = doc.get("layout") or {}
            plan = cls(
                base_url=doc["base_url"],
                entries=tuple(PlanEntry(e["source_uri"], e["dest_path"]) for e in doc["entries"]),
                layout=Layout(LayoutKind(layout.get("kind", "Flatten")), layout.get("root")),
                warnings=tuple(doc.get("warnings", ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MigrationError(f"malformed migration plan: {e}") from e
        dests = [e.dest_path for e in plan.entries]
        if len(set(dests)) != len(dests):
            raise MigrationError("migration plan has duplicate destination paths")
        return plan


class MigrationStatus(str, Enum):
    MIGRATED = "Migrated"
    SKIPPED = "Skipped"
    FAILED = "Failed"


@dataclass(frozen=True)
class MigrationLogEntry:
    source_uri: str
    dest_url: str
    timestamp: str
    sha256_before: str | None
    sha256_after: str | None
    rewrites: tuple[tuple[int, str, str], ...]
    status: MigrationStatus
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "source_uri": self.source_uri,
            "dest_url": self.dest_url,
            "timestamp": self.timestamp,
            "sha256_before": self.sha256_before,
            "sha256_after": self.sha256_after,
            "rewrites": [
                {"link_index": i, "old_target": old, "new_target": new}
                for i, old, new in self.rewrites
            ],
            "status": self.status.value,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MigrationLogEntry":
        return cls(
            source_uri=d["source_uri"],
            dest_url=d["dest_url"],
            timestamp=d["timestamp"],
            sha256_before=d.get("sha256_before"),
            sha256_after=d.get("sha256_after"),
            rewrites=tuple(
                (int(r["link_index"]), r["old_target"], r["new_target"]) for r in d.get("rewrites", [])
            ),
            status=MigrationStatus(d["status"]),
            detail=d.get("detail", ""),
        )


# =====================================================================
# PLANNING
# =====================================================================

def _flatten_names(sources: Sequence[str]) -> dict[str, str]:
    taken: set[str] = set()
    out = {}
    for uri in sources:
        name = uri_basename(uri)
        stem, ext = posixpath.splitext(name)
        candidate, n = name, 1
        while candidate in taken:
            n += 1
            candidate = f"{stem}-{n}{ext}"
        taken.add(candidate)
        out[uri] = candidate
    return out


def _tree_path(uri: str, root: str) -> str:
    src, base = urlsplit(uri), urlsplit(root)
    prefix = base.path.rstrip("/") + "/"
    if (src.scheme, src.netloc) != (base.scheme, base.netloc) or not src.path.startswith(prefix):
        raise MigrationError(f"{uri} is outside the tree root {root}")
    return unquote(src.path[len(prefix):])


def plan_migration(
    g: DependencyGraph,
    selected: Iterable[str],
    base_url: str,
    layout: Layout | None = None,
) -> MigrationPlan:
    """
    Plan destinations for the selected workbooks.

    Precedents of selected workbooks that are not themselves selected are
    reported in `warnings`, never added.

    Raises:
        EmptySelection: nothing selected
        MigrationError: a selected URI is not a graph node, or lies outside
            the PreserveTree root
    """
    layout = layout or Layout.flatten()
    chosen = sorted({canonical_uri(u) for u in selected})
    if not chosen:
        raise EmptySelection("no workbooks selected for migration")
    nodes = set(g.nodes)
    missing = [u for u in chosen if u not in nodes]
    if missing:
        raise MigrationError(f"selected workbooks are not in the dependency graph: {missing}")

    chosen_set = set(chosen)
    warnings = sorted({
        f"{e.source} depends on unselected {e.target}"
        for e in g.edges
        if e.source in chosen_set and e.target not in chosen_set
    })

    if layout.kind is LayoutKind.FLATTEN:
        dests = _flatten_names(chosen)
    else:
        dests = {u: _tree_path(u, layout.root or "") for u in chosen}

    for w in warnings:
        logger.warning(f"[WARN] [MIGRATE] {w}")
    return MigrationPlan(
        base_url=base_url.rstrip("/"),
        entries=tuple(PlanEntry(u, dests[u]) for u in chosen),
        layout=layout,
        warnings=tuple(warnings),
    )


def remap_target(raw_target: str, plan: MigrationPlan, owner_source_uri: str) -> str | None:
    """Repository URL for a link target that points at a plan source, else None."""
    resolved = resolve_target(raw_target, owner_source_uri)
    dest = plan.dest_for(resolved)
    if dest is None:
        return None
    return join_url(plan.base_url, dest)


# =====================================================================
# EXECUTION
# =====================================================================

def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _processing_order(sources: Sequence[str], deps: dict[str, set[str]]) -> tuple[list[str], list[list[str]]]:
    """Precedents first; members of a cycle in URI order. Returns (order, cycles)."""
    g = nx.DiGraph()
    g.add_nodes_from(sources)
    for src, precs in deps.items():
        # precedent -> dependent, so a topological order lists precedents first
        g.add_edges_from((p, src) for p in precs)
    condensed = nx.condensation(g)
    members = {n: sorted(condensed.nodes[n]["members"]) for n in condensed.nodes}
    order: list[str] = []
    loops = []
    for comp in nx.lexicographical_topological_sort(condensed, key=lambda n: members[n][0]):
        group = members[comp]
        if len(group) > 1 or g.has_edge(group[0], group[0]):
            loops.append(group)
        order.extend(group)
    return order, loops


def execute(
    plan: MigrationPlan,
    repo: RepositoryClient,
    loader: Callable[[str], bytes] | None = None,
    author: str = "migration",
    clock: Callable[[], datetime] | None = None,
) -> list[MigrationLogEntry]:
    """
    Migrate every plan entry and return the log, one entry per plan entry.

    Raises:
        RepositoryUnreachable: the repository did not answer; nothing written
    """
    load = loader or read_file_uri
    now = clock or (lambda: datetime.now(timezone.utc))
    try:
        repo.ping()
    except Exception as e:
        raise RepositoryUnreachable(f"repository unreachable: {e}") from e

    sources = [e.source_uri for e in plan.entries]
    by_source = {e.source_uri: e for e in plan.entries}
    data: dict[str, bytes] = {}
    mappings: dict[str, dict[str, str]] = {}
    deps: dict[str, set[str]] = {}
    read_errors: dict[str, str] = {}

    # every mapping is computed before any write, so cycles rewrite correctly
    for src in sources:
        try:
            raw = load(src)
            links = list_link_targets(raw)
        except (PackageError, OSError) as e:
            read_errors[src] = str(e)
            logger.error(f"[ERROR] [MIGRATE] cannot read {src}: {e}")
            continue
        data[src] = raw
        mapping: dict[str, str] = {}
        for _index, target, _mode in links:
            new = remap_target(target, plan, src)
            if new is not None:
                mapping[target] = new
                deps.setdefault(src, set()).add(resolve_target(target, src))
        mappings[src] = mapping

    order, loops = _processing_order(sources, deps)
    for loop in loops:
        logger.warning(f"[WARN] [MIGRATE] link cycle, processing in URI order: {loop}")
    in_loop = {m: loop for loop in loops for m in loop}

    log: list[MigrationLogEntry] = []
    not_migrated: set[str] = set(read_errors)
    for src in order:
        entry = by_source[src]
        dest_url = plan.dest_url(entry)
        stamp = now().isoformat(timespec="seconds")
        if src in read_errors:
            log.append(MigrationLogEntry(
                src, dest_url, stamp, None, None, (), MigrationStatus.FAILED, read_errors[src],
            ))
            continue
        blocked = sorted(p for p in deps.get(src, ()) if p in not_migrated and p != src)
        if blocked:
            not_migrated.add(src)
            log.append(MigrationLogEntry(
                src, dest_url, stamp, _sha(data[src]), None, (), MigrationStatus.SKIPPED,
                f"precedent not migrated: {', '.join(blocked)}",
            ))
            logger.warning(f"[WARN] [MIGRATE] skipped {src}: precedents not migrated")
            continue
        before = _sha(data[src])
        try:
            out, applied = rewrite_links(data[src], mappings[src])
            after = _sha(out)
            repo.checkin(entry.dest_path, out, author, f"migrated from {src}")
        except (SheetGuardError, OSError) as e:
            not_migrated.add(src)
            log.append(MigrationLogEntry(
                src, dest_url, stamp, before, None, (), MigrationStatus.FAILED, str(e),
            ))
            logger.error(f"[ERROR] [MIGRATE] {src}: {e}")
            continue
        detail = f"cycle: {', '.join(in_loop[src])}" if src in in_loop else ""
        log.append(MigrationLogEntry(
            src, dest_url, stamp, before, after, tuple(applied), MigrationStatus.MIGRATED, detail,
        ))
        logger.info(f"[MIGRATE] {src} -> {dest_url} ({len(applied)} links rewritten)")

    migrated = sum(1 for e in log if e.status is MigrationStatus.MIGRATED)
    logger.info(f"[OK] migration finished: {migrated}/{len(log)} migrated")
    return log


# =====================================================================
# LOG SERIALIZATION
# =====================================================================

LOG_CSV_COLUMNS = (
    "source_uri", "dest_url", "timestamp", "status", "sha256_before",
    "sha256_after", "link_index", "old_target", "new_target", "detail",
)


def log_to_jsonl(entries: Iterable[MigrationLogEntry]) -> str:
    return "".join(json.dumps(e.to_dict(), ensure_ascii=False) + "\n" for e in entries)


def log_from_jsonl(text: str) -> list[MigrationLogEntry]:
    return [MigrationLogEntry.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


def log_to_csv(entries: Iterable[MigrationLogEntry]) -> str:
    """One row per rewrite (or one row for entries without rewrites)."""
    rows = []
    for e in entries:
        base = {
            "source_uri": e.source_uri,
            "dest_url": e.dest_url,
            "timestamp": e.timestamp,
            "status": e.status.value,
            "sha256_before": e.sha256_before,
            "sha256_after": e.sha256_after,
            "detail": e.detail,
        }
        if not e.rewrites:
            rows.append({**base, "link_index": None, "old_target": None, "new_target": None})
        for index, old, new in e.rewrites:
            rows.append({**base, "link_index": index, "old_target": old, "new_target": new})
    df = pd.DataFrame(rows, columns=list(LOG_CSV_COLUMNS), dtype=object)
    buf = io.StringIO()
    df.to_csv(buf, index=False, lineterminator="\r\n")
    return buf.getvalue()
