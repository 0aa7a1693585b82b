"""
DISCOVERY Module
---------------------------------------------------------
Finds end-user-computing files under directory roots and builds one
inventory record per file.

  1. Walk the roots (sorted, hidden entries skipped by default)
  2. Stat every matching file; parse spreadsheet kinds to fill stats
  3. Optionally assess risk in the same pass
  4. Filter with a query and return records sorted by URI

Access databases and other files get metadata-only records.
"""

from __future__ import annotations

import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import pandas as pd

from config.settings import DEFAULT_EXTENSIONS, SCAN_WORKERS
from sheetguard.errors import PackageError, RootNotFound
from sheetguard.formula import compute_stats
from sheetguard.grid import WorkbookStats
from sheetguard.ooxml import read_package
from sheetguard.query import Query, evaluate, parse_query as _parse_query
from sheetguard.risk import RiskConfig, RiskLevel, assess
from sheetguard.uris import is_absolute, path_to_uri, uri_to_path

logger = logging.getLogger(__name__)

DEFAULT_WORKERS = SCAN_WORKERS


class FileKind(str, Enum):
    SPREADSHEET = "Spreadsheet"
    MACRO_SPREADSHEET = "MacroSpreadsheet"
    ACCESS_DB = "AccessDb"
    OTHER = "Other"

    @property
    def is_spreadsheet(self) -> bool:
        return self in (FileKind.SPREADSHEET, FileKind.MACRO_SPREADSHEET)


KIND_BY_EXTENSION = {
    "xlsx": FileKind.SPREADSHEET,
    "xltx": FileKind.SPREADSHEET,
    "xlsm": FileKind.MACRO_SPREADSHEET,
    "xltm": FileKind.MACRO_SPREADSHEET,
    "mdb": FileKind.ACCESS_DB,
    "accdb": FileKind.ACCESS_DB,
}


class ParseStatus(str, Enum):
    PARSED = "Parsed"
    METADATA_ONLY = "MetadataOnly"
    FAILED = "Failed"


# Column order of CSV exports and key order of JSON exports
FIELD_CATALOG = (
    "uri", "size_bytes", "created", "modified", "owner", "kind",
    "parse_status", "risk", "sheet_count", "formula_count",
    "external_link_count", "unique_function_count", "error_cell_count",
    "has_macros", "dependents", "detail",
)
DERIVED_FIELDS = ("year(created)", "year(modified)")
QUERY_FIELDS = FIELD_CATALOG + DERIVED_FIELDS

_STAT_FIELDS = (
    "sheet_count", "formula_count", "external_link_count",
    "unique_function_count", "error_cell_count", "has_macros",
)


def kind_for(path: str | Path) -> FileKind:
    return KIND_BY_EXTENSION.get(Path(path).suffix.lower().lstrip("."), FileKind.OTHER)


@dataclass(frozen=True)
class InventoryRecord:
    uri: str
    size_bytes: int
    created: datetime | None
    modified: datetime | None
    owner: str
    kind: FileKind
    parse_status: ParseStatus
    stats: WorkbookStats | None = None
    risk: RiskLevel | None = None
    dependents: int | None = None
    detail: str = ""

    def field(self, name: str) -> object:
        """Value of a catalog or derived field; None when absent."""
        if name in ("year(created)", "year(modified)"):
            stamp = self.created if name == "year(created)" else self.modified
            return stamp.year if stamp else None
        if name in _STAT_FIELDS:
            return getattr(self.stats, name) if self.stats else None
        if name == "kind":
            return self.kind.value
        if name == "parse_status":
            return self.parse_status.value
        if name == "risk":
            return self.risk.value if self.risk else None
        if name in FIELD_CATALOG:
            return getattr(self, name)
        return None

    def to_row(self) -> dict:
        row = {}
        for name in FIELD_CATALOG:
            value = self.field(name)
            if isinstance(value, datetime):
                value = value.isoformat()
            row[name] = value
        return row

    @classmethod
    def from_row(cls, row: dict) -> "InventoryRecord":
        """Inverse of to_row; accepts JSON-typed or CSV text values."""

        def _blank(v) -> bool:
            return v is None or (isinstance(v, str) and v == "")

        def _int(v):
            return None if _blank(v) else int(v)

        def _bool(v):
            if _blank(v):
                return None
            if isinstance(v, bool):
                return v
            return str(v).strip().lower() == "true"

        def _stamp(v):
            return None if _blank(v) else datetime.fromisoformat(str(v))

        status = ParseStatus(row["parse_status"])
        stats = None
        if status is ParseStatus.PARSED:
            stats = WorkbookStats(
                **{name: _int(row.get(name)) or 0 for name in _STAT_FIELDS[:-1]},
                has_macros=bool(_bool(row.get("has_macros"))),
            )
        risk = row.get("risk")
        return cls(
            uri=str(row["uri"]),
            size_bytes=_int(row.get("size_bytes")) or 0,
            created=_stamp(row.get("created")),
            modified=_stamp(row.get("modified")),
            owner=str(row.get("owner") or "unknown"),
            kind=FileKind(row["kind"]),
            parse_status=status,
            stats=stats,
            risk=None if _blank(risk) else RiskLevel(risk),
            dependents=_int(row.get("dependents")),
            detail="" if _blank(row.get("detail")) else str(row["detail"]),
        )


# =====================================================================
# QUERIES
# =====================================================================

def parse_query(text: str) -> Query:
    """Parse a query against the inventory field catalog."""
    return _parse_query(text, QUERY_FIELDS)


def matches(record: InventoryRecord, q: Query) -> bool:
    return evaluate(q, record.field)


# =====================================================================
# SCAN
# =====================================================================

def _owner(st: os.stat_result) -> str:
    try:
        import pwd

        return pwd.getpwuid(st.st_uid).pw_name
    except (ImportError, KeyError):
        return "unknown"


def _stamp(ts: float | None) -> datetime | None:
    if ts is None:
        return None
    return datetime.fromtimestamp(ts, tz=timezone.utc)


def _root_path(root: str | Path) -> Path:
    text = str(root)
    if is_absolute(text):
        path = uri_to_path(text)
        if path is None:
            raise RootNotFound(text)
        return path
    return Path(text)


def _walk(root: Path, extensions: set[str], include_hidden: bool) -> list[Path]:
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        if not include_hidden:
            dirnames[:] = [d for d in dirnames if not d.startswith(".")]
        dirnames.sort()
        for name in sorted(filenames):
            if not include_hidden and name.startswith("."):
                continue
            if Path(name).suffix.lower().lstrip(".") in extensions:
                found.append(Path(dirpath) / name)
    return found


def inspect_file(path: Path, assess_with: RiskConfig | None = None) -> InventoryRecord:
    """Build one inventory record; read and parse failures stay in the record."""
    uri = path_to_uri(path)
    kind = kind_for(path)
    try:
        st = path.stat()
    except OSError as e:
        logger.warning(f"[WARN] cannot stat {path}: {e}")
        return InventoryRecord(
            uri=uri, size_bytes=0, created=None, modified=None, owner="unknown",
            kind=kind, parse_status=ParseStatus.FAILED, detail=f"stat failed: {e}",
        )
    base = InventoryRecord(
        uri=uri,
        size_bytes=st.st_size,
        created=_stamp(getattr(st, "st_birthtime", None) or st.st_ctime),
        modified=_stamp(st.st_mtime),
        owner=_owner(st),
        kind=kind,
        parse_status=ParseStatus.METADATA_ONLY,
    )
    if not kind.is_spreadsheet:
        return base
    try:
        wb = read_package(path.read_bytes(), uri)
        stats = compute_stats(wb)
        risk = None
        if assess_with is not None:
            _, result = assess(wb, assess_with)
            risk = result.rating
    except (PackageError, OSError, ValueError) as e:
        logger.warning(f"[WARN] {uri}: {e}")
        return replace(base, parse_status=ParseStatus.FAILED, detail=str(e))
    logger.debug(f"[PARSE] {uri}: {stats.sheet_count} sheets, {stats.formula_count} formulas")
    return replace(base, parse_status=ParseStatus.PARSED, stats=stats, risk=risk)


def scan(
    roots: Sequence[str | Path],
    extensions: Iterable[str] = DEFAULT_EXTENSIONS,
    query: Query | None = None,
    *,
    include_hidden: bool = False,
    workers: int = DEFAULT_WORKERS,
    assess_with: RiskConfig | None = None,
) -> list[InventoryRecord]:
    """
    Scan directory roots and return inventory records sorted by URI.

    Args:
        roots: directory paths or file URIs
        extensions: extensions to include, with or without the leading dot
        query: optional filter applied after the scan
        include_hidden: descend into dot-directories and list dot-files
        workers: parser threads
        assess_with: when given, every parsed workbook also gets a risk rating

    Raises:
        RootNotFound: a root is missing or not a directory
    """
    exts = {e.lower().lstrip(".") for e in extensions}
    paths: dict[str, Path] = {}
    for root in roots:
        root_path = _root_path(root)
        if not root_path.is_dir():
            raise RootNotFound(str(root))
        logger.info(f"[SCAN] walking {root_path}")
        for path in _walk(root_path, exts, include_hidden):
            paths.setdefault(path_to_uri(path), path)

    ordered = [paths[uri] for uri in sorted(paths)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(lambda p: inspect_file(p, assess_with), ordered))
    records.sort(key=lambda r: r.uri)

    failed = sum(1 for r in records if r.parse_status is ParseStatus.FAILED)
    logger.info(f"[SCAN] {len(records)} files found, {failed} failed to parse")
    if query is not None:
        records = [r for r in records if matches(r, query)]
        logger.info(f"[SCAN] {len(records)} records match the query")
    return records


def annotate_risk(
    records: Iterable[InventoryRecord],
    cfg: RiskConfig,
    loader: Callable[[str], bytes] | None = None,
    broken: dict[str, list[str]] | None = None,
) -> list[InventoryRecord]:
    """
    Risk-rate every parsed spreadsheet record.

    Args:
        loader: uri -> package bytes (defaults to reading the file URI)
        broken: uri -> unresolved link targets, fed into BrokenLink findings
    """
    load = loader or _read_uri
    out = []
    for record in records:
        if record.parse_status is not ParseStatus.PARSED:
            out.append(record)
            continue
        try:
            wb = read_package(load(record.uri), record.uri)
            _, result = assess(wb, cfg, (broken or {}).get(record.uri, ()))
        except (PackageError, OSError, ValueError) as e:
            logger.warning(f"[WARN] risk assessment failed for {record.uri}: {e}")
            out.append(replace(record, detail=str(e)))
            continue
        out.append(replace(record, risk=result.rating))
    return out


def _read_uri(uri: str) -> bytes:
    path = uri_to_path(uri)
    if path is None:
        raise OSError(f"not a local file URI: {uri}")
    return path.read_bytes()


# =====================================================================
# EXPORT / IMPORT
# =====================================================================

def export_inventory(records: Iterable[InventoryRecord], fmt: str = "csv") -> bytes:
    """
    Serialize records. CSV is RFC 4180 (CRLF, header row) in catalog
    column order; JSON is an array of objects with the same keys.
    """
    rows = [r.to_row() for r in records]
    if fmt == "json":
        return (json.dumps(rows, indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    if fmt != "csv":
        raise ValueError(f"unsupported inventory format: {fmt}")
    df = pd.DataFrame(rows, columns=list(FIELD_CATALOG), dtype=object)
    return df.to_csv(index=False, lineterminator="\r\n").encode("utf-8")


def load_inventory(data: bytes, fmt: str = "json") -> list[InventoryRecord]:
    if fmt == "json":
        rows = json.loads(data.decode("utf-8"))
    elif fmt == "csv":
        df = pd.read_csv(io.BytesIO(data), dtype=str, keep_default_na=False)
        rows = df.to_dict(orient="records")
    else:
        raise ValueError(f"unsupported inventory format: {fmt}")
    return [InventoryRecord.from_row(row) for row in rows]
