"""
CHANGES Module
---------------------------------------------------------
Cell-level change audit between two versions of a workbook.

  1. diff_workbooks         - sheets, names, links, part hashes, cells
  2. align_rows             - LCS over row fingerprints
  3. render_change_report   - text | json | csv
  4. notify                 - one outbox message per matching subscriber

Rows are aligned before columns. When one sheet shows both row and
column insertions or deletions, the sheet is compared positionally and
listed in `ambiguous_sheets`. Style-only edits are not reported.
"""

from __future__ import annotations

import difflib
import io
import json
import logging
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from email.message import EmailMessage
from email.utils import format_datetime
from enum import Enum
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import pandas as pd

from sheetguard.errors import MalformedFormula, OutboxUnwritable
from sheetguard.formula import normalize_formula_r1c1
from sheetguard.grid import (
    EMPTY,
    Cell,
    CellAddress,
    CellValue,
    Visibility,
    Workbook,
    Worksheet,
)

logger = logging.getLogger(__name__)

# LCS is computed by dynamic programming up to this many table cells;
# larger gaps fall back to difflib's matcher.
DP_CELL_LIMIT = 4_000_000
# Unequal gaps longer than this keep their surplus rows at the end.
GAP_SEARCH_LIMIT = 200

TOPICS = (
    "data", "formulas", "structure", "sheets", "names",
    "links", "macros", "connections", "visibility",
)


class ChangeKind(str, Enum):
    VALUE_CHANGED = "ValueChanged"
    FORMULA_CHANGED = "FormulaChanged"
    BOTH_CHANGED = "BothChanged"
    ADDED = "Added"
    REMOVED = "Removed"


@dataclass(frozen=True)
class CellChange:
    addr: CellAddress
    kind: ChangeKind
    old_value: CellValue | None = None
    old_formula: str | None = None
    new_value: CellValue | None = None
    new_formula: str | None = None

    def __post_init__(self):
        if self.kind is ChangeKind.ADDED and self.old_value is not None:
            raise ValueError("Added change carries an old value")
        if self.kind is ChangeKind.REMOVED and self.new_value is not None:
            raise ValueError("Removed change carries a new value")

    def to_dict(self) -> dict:
        return {
            "sheet": self.addr.sheet,
            "cell": self.addr.local(),
            "kind": self.kind.value,
            "old_value": _value_json(self.old_value),
            "old_formula": self.old_formula,
            "new_value": _value_json(self.new_value),
            "new_formula": self.new_formula,
        }


class StructuralKind(str, Enum):
    ROW_INSERTED = "RowInserted"
    ROW_DELETED = "RowDeleted"
    COL_INSERTED = "ColInserted"
    COL_DELETED = "ColDeleted"


@dataclass(frozen=True, order=True)
class StructuralOp:
    sheet: str
    kind: StructuralKind
    index: int
    count: int = 1

    def __post_init__(self):
        if self.index < 1 or self.count < 1:
            raise ValueError(f"structural op needs index >= 1 and count >= 1: {self}")

    def describe(self) -> str:
        noun = "row" if self.kind in (StructuralKind.ROW_INSERTED, StructuralKind.ROW_DELETED) else "column"
        verb = "inserted" if self.kind in (StructuralKind.ROW_INSERTED, StructuralKind.COL_INSERTED) else "deleted"
        plural = "s" if self.count > 1 else ""
        return f"{self.count} {noun}{plural} {verb} at {self.index}"


@dataclass(frozen=True, order=True)
class SheetRename:
    old_name: str
    new_name: str


@dataclass(frozen=True, order=True)
class NameChange:
    name: str
    old_formula: str | None
    new_formula: str | None


@dataclass(frozen=True, order=True)
class LinkChange:
    index: int
    old_target: str | None
    new_target: str | None


@dataclass(frozen=True, order=True)
class VisibilityChange:
    sheet: str
    old: Visibility
    new: Visibility


@dataclass(frozen=True)
class ChangeSet:
    old_label: str = ""
    new_label: str = ""
    cell_changes: tuple[CellChange, ...] = ()
    structural: tuple[StructuralOp, ...] = ()
    sheets_added: tuple[str, ...] = ()
    sheets_removed: tuple[str, ...] = ()
    sheets_renamed: tuple[SheetRename, ...] = ()
    defined_name_changes: tuple[NameChange, ...] = ()
    link_changes: tuple[LinkChange, ...] = ()
    macro_changed: bool = False
    connections_changed: bool = False
    ambiguous_sheets: tuple[str, ...] = ()
    visibility_changes: tuple[VisibilityChange, ...] = ()

    @property
    def is_empty(self) -> bool:
        return not (
            self.cell_changes or self.structural or self.sheets_added
            or self.sheets_removed or self.sheets_renamed or self.defined_name_changes
            or self.link_changes or self.macro_changed or self.connections_changed
            or self.visibility_changes
        )

    def topics(self) -> set[str]:
        """Subscription topics this change set touches."""
        found: set[str] = set()
        for c in self.cell_changes:
            if c.kind in (ChangeKind.VALUE_CHANGED, ChangeKind.BOTH_CHANGED):
                found.add("data")
            if c.kind in (ChangeKind.FORMULA_CHANGED, ChangeKind.BOTH_CHANGED):
                found.add("formulas")
            if c.kind in (ChangeKind.ADDED, ChangeKind.REMOVED):
                found.add("formulas" if (c.old_formula or c.new_formula) else "data")
        if self.structural:
            found.add("structure")
        if self.sheets_added or self.sheets_removed or self.sheets_renamed:
            found.add("sheets")
        if self.defined_name_changes:
            found.add("names")
        if self.link_changes:
            found.add("links")
        if self.macro_changed:
            found.add("macros")
        if self.connections_changed:
            found.add("connections")
        if self.visibility_changes:
            found.add("visibility")
        return found

    def to_dict(self) -> dict:
        return {
            "old_label": self.old_label,
            "new_label": self.new_label,
            "sheets_added": list(self.sheets_added),
            "sheets_removed": list(self.sheets_removed),
            "sheets_renamed": [{"old": r.old_name, "new": r.new_name} for r in self.sheets_renamed],
            "visibility_changes": [
                {"sheet": v.sheet, "old": v.old.value, "new": v.new.value} for v in self.visibility_changes
            ],
            "defined_name_changes": [
                {"name": n.name, "old": n.old_formula, "new": n.new_formula} for n in self.defined_name_changes
            ],
            "link_changes": [
                {"index": l.index, "old_target": l.old_target, "new_target": l.new_target}
                for l in self.link_changes
            ],
            "macro_changed": self.macro_changed,
            "connections_changed": self.connections_changed,
            "ambiguous_sheets": list(self.ambiguous_sheets),
            "structural": [
                {"sheet": s.sheet, "kind": s.kind.value, "index": s.index, "count": s.count}
                for s in self.structural
            ],
            "cell_changes": [c.to_dict() for c in self.cell_changes],
        }


def _value_json(v: CellValue | None):
    if v is None:
        return None
    return {"kind": v.kind.value, "value": v.to_python()}


# =====================================================================
# ALIGNMENT
# =====================================================================

def _lcs_pairs(a: Sequence[Hashable], b: Sequence[Hashable]) -> list[tuple[int, int]]:
    """Index pairs (0-based) of a longest common subsequence."""
    n, m = len(a), len(b)
    head = 0
    while head < n and head < m and a[head] == b[head]:
        head += 1
    tail = 0
    while tail < n - head and tail < m - head and a[n - 1 - tail] == b[m - 1 - tail]:
        tail += 1
    pairs = [(i, i) for i in range(head)]
    mid_a, mid_b = a[head:n - tail], b[head:m - tail]
    la, lb = len(mid_a), len(mid_b)

    if la and lb:
        if la * lb <= DP_CELL_LIMIT:
            dp = [[0] * (lb + 1) for _ in range(la + 1)]
            for i in range(la - 1, -1, -1):
                row, below = dp[i], dp[i + 1]
                ai = mid_a[i]
                for j in range(lb - 1, -1, -1):
                    if ai == mid_b[j]:
                        row[j] = below[j + 1] + 1
                    else:
                        row[j] = below[j] if below[j] >= row[j + 1] else row[j + 1]
            i = j = 0
            while i < la and j < lb:
                if mid_a[i] == mid_b[j]:
                    pairs.append((head + i, head + j))
                    i += 1
                    j += 1
                elif dp[i + 1][j] >= dp[i][j + 1]:
                    i += 1
                else:
                    j += 1
        else:
            matcher = difflib.SequenceMatcher(None, list(mid_a), list(mid_b), autojunk=False)
            for block in matcher.get_matching_blocks():
                pairs.extend((head + block.a + k, head + block.b + k) for k in range(block.size))

    pairs.extend((n - tail + k, m - tail + k) for k in range(tail))
    return pairs


def _similarity(a: Hashable, b: Hashable) -> int:
    if isinstance(a, tuple) and isinstance(b, tuple):
        return len(set(a) & set(b))
    return int(a == b)


def _pair_gap(
    olds: list[int], news: list[int], fp_old: Sequence, fp_new: Sequence
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """
    Pair the unmatched rows between two LCS anchors.

    Equal-length gaps pair positionally. Otherwise the surplus rows are
    treated as one contiguous block, placed where the remaining pairs
    share the most cells.
    """
    if len(olds) == len(news):
        return list(zip(olds, news)), [], []
    short, long_, short_is_old = (olds, news, True) if len(olds) < len(news) else (news, olds, False)
    k = len(long_) - len(short)
    best_s, best_score = len(short), -1
    candidates = range(len(short) + 1) if len(short) <= GAP_SEARCH_LIMIT else ()
    for s in candidates:
        score = 0
        for i, x in enumerate(short):
            y = long_[i] if i < s else long_[i + k]
            a, b = (fp_old[x], fp_new[y]) if short_is_old else (fp_old[y], fp_new[x])
            score += _similarity(a, b)
        if score > best_score:
            best_s, best_score = s, score
    pairs = []
    for i, x in enumerate(short):
        y = long_[i] if i < best_s else long_[i + k]
        pairs.append((x, y) if short_is_old else (y, x))
    surplus = long_[best_s:best_s + k]
    return (pairs, [], surplus) if short_is_old else (pairs, surplus, [])


def align_sequences(
    fp_old: Sequence[Hashable], fp_new: Sequence[Hashable]
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """
    Align two fingerprint sequences.

    Returns (pairs, inserted, deleted) with 1-based indices. `pairs`
    holds LCS matches plus positionally paired edits; it is strictly
    increasing in both coordinates.
    """
    anchors = _lcs_pairs(fp_old, fp_new)
    pairs: list[tuple[int, int]] = []
    inserted: list[int] = []
    deleted: list[int] = []
    prev_o = prev_n = -1
    for o, n in anchors + [(len(fp_old), len(fp_new))]:
        gap_pairs, gap_del, gap_ins = _pair_gap(
            list(range(prev_o + 1, o)), list(range(prev_n + 1, n)), fp_old, fp_new
        )
        pairs.extend(gap_pairs)
        deleted.extend(gap_del)
        inserted.extend(gap_ins)
        if o < len(fp_old):
            pairs.append((o, n))
        prev_o, prev_n = o, n
    return (
        [(o + 1, n + 1) for o, n in pairs],
        [n + 1 for n in inserted],
        [o + 1 for o in deleted],
    )


def _r1c1(cell: Cell) -> str | None:
    if cell.formula is None:
        return None
    try:
        return normalize_formula_r1c1(cell.formula, cell.addr)
    except MalformedFormula:
        return cell.formula


def row_fingerprints(ws: Worksheet) -> list[tuple]:
    """Ordered (col, value, R1C1 formula) per row 1..max_row; blank rows are ()."""
    rows: dict[int, list] = {}
    for (r, c), cell in sorted(ws.cells.items()):
        rows.setdefault(r, []).append((c, cell.value, _r1c1(cell)))
    return [tuple(rows.get(r, ())) for r in range(1, ws.max_row + 1)]


def align_rows(old: Worksheet, new: Worksheet) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """(matched pairs, inserted new rows, deleted old rows), all 1-based."""
    return align_sequences(row_fingerprints(old), row_fingerprints(new))


def _column_fingerprints(ws: Worksheet, rows: Sequence[int]) -> list[tuple]:
    ordinal = {r: i for i, r in enumerate(rows)}
    cols: dict[int, list] = {}
    for (r, c), cell in sorted(ws.cells.items()):
        if r in ordinal:
            cols.setdefault(c, []).append((ordinal[r], cell.value, _r1c1(cell)))
    fps = [tuple(sorted(cols.get(c, ()))) for c in range(1, ws.max_col + 1)]
    while fps and not fps[-1]:
        fps.pop()
    return fps


def _runs(indices: Iterable[int]) -> list[tuple[int, int]]:
    runs: list[list[int]] = []
    for i in sorted(indices):
        if runs and runs[-1][0] + runs[-1][1] == i:
            runs[-1][1] += 1
        else:
            runs.append([i, 1])
    return [(start, count) for start, count in runs]


# =====================================================================
# SHEET DIFF
# =====================================================================

def _compare_cells(old: Cell | None, new: Cell | None, old_at: CellAddress, new_at: CellAddress) -> CellChange | None:
    if old is None and new is None:
        return None
    if old is None:
        return CellChange(new_at, ChangeKind.ADDED, new_value=new.value, new_formula=new.formula)
    if new is None:
        return CellChange(old_at, ChangeKind.REMOVED, old_value=old.value, old_formula=old.formula)
    value_changed = old.value != new.value
    if old.addr.key == new.addr.key:
        formula_changed = old.formula != new.formula
    else:
        formula_changed = _r1c1(old) != _r1c1(new)
    if not (value_changed or formula_changed):
        return None
    kind = (
        ChangeKind.BOTH_CHANGED if value_changed and formula_changed
        else ChangeKind.VALUE_CHANGED if value_changed
        else ChangeKind.FORMULA_CHANGED
    )
    return CellChange(new_at, kind, old.value, old.formula, new.value, new.formula)


def _addr(sheet: str, row: int, col: int) -> CellAddress:
    return CellAddress(row, col, sheet)


def diff_sheet(old: Worksheet, new: Worksheet) -> tuple[list[CellChange], list[StructuralOp], bool]:
    """Cell changes, structural ops and whether the sheet fell back to positional."""
    sheet = new.name
    row_pairs, rows_ins, rows_del = align_rows(old, new)
    col_pairs, cols_ins, cols_del = align_sequences(
        _column_fingerprints(old, [o for o, _ in row_pairs]),
        _column_fingerprints(new, [n for _, n in row_pairs]),
    )
    ambiguous = bool(rows_ins or rows_del) and bool(cols_ins or cols_del)
    if ambiguous:
        logger.warning(f"[WARN] [DIFF] {sheet}: row and column edits together, comparing positionally")
        last_row = max(old.max_row, new.max_row)
        last_col = max(old.max_col, new.max_col)
        row_pairs, rows_ins, rows_del = [(r, r) for r in range(1, last_row + 1)], [], []
        col_pairs, cols_ins, cols_del = [(c, c) for c in range(1, last_col + 1)], [], []

    changes: list[CellChange] = []
    for o_row, n_row in row_pairs:
        for o_col, n_col in col_pairs:
            change = _compare_cells(
                old.get(o_row, o_col), new.get(n_row, n_col),
                _addr(sheet, o_row, o_col), _addr(sheet, n_row, n_col),
            )
            if change is not None:
                changes.append(change)
        for o_col in cols_del:
            cell = old.get(o_row, o_col)
            if cell is not None:
                changes.append(CellChange(_addr(sheet, o_row, o_col), ChangeKind.REMOVED,
                                          old_value=cell.value, old_formula=cell.formula))
        for n_col in cols_ins:
            cell = new.get(n_row, n_col)
            if cell is not None:
                changes.append(CellChange(_addr(sheet, n_row, n_col), ChangeKind.ADDED,
                                          new_value=cell.value, new_formula=cell.formula))
    deleted_rows, inserted_rows = set(rows_del), set(rows_ins)
    for cell in old.sorted_cells():
        if cell.addr.row in deleted_rows:
            changes.append(CellChange(_addr(sheet, cell.addr.row, cell.addr.col), ChangeKind.REMOVED,
                                      old_value=cell.value, old_formula=cell.formula))
    for cell in new.sorted_cells():
        if cell.addr.row in inserted_rows:
            changes.append(CellChange(_addr(sheet, cell.addr.row, cell.addr.col), ChangeKind.ADDED,
                                      new_value=cell.value, new_formula=cell.formula))

    ops = (
        [StructuralOp(sheet, StructuralKind.ROW_INSERTED, s, k) for s, k in _runs(rows_ins)]
        + [StructuralOp(sheet, StructuralKind.ROW_DELETED, s, k) for s, k in _runs(rows_del)]
        + [StructuralOp(sheet, StructuralKind.COL_INSERTED, s, k) for s, k in _runs(cols_ins)]
        + [StructuralOp(sheet, StructuralKind.COL_DELETED, s, k) for s, k in _runs(cols_del)]
    )
    return changes, ops, ambiguous


def _sheet_hash(ws: Worksheet) -> tuple:
    return tuple((k, c.value, c.formula) for k, c in sorted(ws.cells.items()))


def _change_order(c: CellChange) -> tuple:
    return (c.addr.sheet, c.addr.row, c.addr.col, c.kind.value)


def diff_workbooks(old: Workbook, new: Workbook, old_label: str = "", new_label: str = "") -> ChangeSet:
    """
    Compare two parsed workbooks.

    Sheets are matched by name. One removed plus one added sheet with
    identical cells is reported as a rename.
    """
    old_names = {ws.name for ws in old.sheets}
    new_names = {ws.name for ws in new.sheets}
    removed = sorted(old_names - new_names)
    added = sorted(new_names - old_names)
    renamed: list[SheetRename] = []
    pairs = [(old.sheet(n), new.sheet(n)) for n in sorted(old_names & new_names)]
    if len(removed) == 1 and len(added) == 1:
        o, n = old.sheet(removed[0]), new.sheet(added[0])
        if _sheet_hash(o) == _sheet_hash(n):
            renamed.append(SheetRename(o.name, n.name))
            pairs.append((o, n))
            removed, added = [], []

    cell_changes: list[CellChange] = []
    structural: list[StructuralOp] = []
    ambiguous: list[str] = []
    visibility: list[VisibilityChange] = []
    for o, n in pairs:
        if o.visibility is not n.visibility:
            visibility.append(VisibilityChange(n.name, o.visibility, n.visibility))
        changes, ops, fell_back = diff_sheet(o, n)
        cell_changes.extend(changes)
        structural.extend(ops)
        if fell_back:
            ambiguous.append(n.name)

    old_defs, new_defs = dict(old.defined_names), dict(new.defined_names)
    name_changes = [
        NameChange(name, old_defs.get(name), new_defs.get(name))
        for name in sorted(old_defs.keys() | new_defs.keys())
        if old_defs.get(name) != new_defs.get(name)
    ]
    old_links = {l.index: l for l in old.external_links}
    new_links = {l.index: l for l in new.external_links}
    link_changes = []
    for index in sorted(old_links.keys() | new_links.keys()):
        a, b = old_links.get(index), new_links.get(index)
        if (a and (a.target, a.mode)) != (b and (b.target, b.mode)):
            link_changes.append(LinkChange(index, a.target if a else None, b.target if b else None))

    cs = ChangeSet(
        old_label=old_label or old.source_uri,
        new_label=new_label or new.source_uri,
        cell_changes=tuple(sorted(cell_changes, key=_change_order)),
        structural=tuple(sorted(structural)),
        sheets_added=tuple(added),
        sheets_removed=tuple(removed),
        sheets_renamed=tuple(renamed),
        defined_name_changes=tuple(name_changes),
        link_changes=tuple(link_changes),
        macro_changed=old.vba_sha256 != new.vba_sha256,
        connections_changed=old.connections_sha256 != new.connections_sha256,
        ambiguous_sheets=tuple(sorted(ambiguous)),
        visibility_changes=tuple(sorted(visibility)),
    )
    logger.info(
        f"[DIFF] {cs.old_label} -> {cs.new_label}: {len(cs.cell_changes)} cell changes, "
        f"{len(cs.structural)} structural ops"
    )
    return cs


# =====================================================================
# REPORTS
# =====================================================================

REPORT_CSV_COLUMNS = (
    "category", "sheet", "location", "kind", "old_value", "new_value",
    "old_formula", "new_formula", "detail",
)


def _shown(value: CellValue | None, formula: str | None) -> str:
    if formula is not None:
        return f"={formula}"
    if value is None or value == EMPTY:
        return "(empty)"
    return value.display()


def _report_rows(cs: ChangeSet) -> list[dict]:
    rows = []

    def add(category, sheet="", location="", kind="", old_value="", new_value="",
            old_formula="", new_formula="", detail=""):
        rows.append({
            "category": category, "sheet": sheet, "location": location, "kind": kind,
            "old_value": old_value, "new_value": new_value,
            "old_formula": old_formula, "new_formula": new_formula, "detail": detail,
        })

    for name in cs.sheets_added:
        add("sheet", name, kind="SheetAdded")
    for name in cs.sheets_removed:
        add("sheet", name, kind="SheetRemoved")
    for r in cs.sheets_renamed:
        add("sheet", r.new_name, kind="SheetRenamed", detail=f"was {r.old_name}")
    for v in cs.visibility_changes:
        add("sheet", v.sheet, kind="VisibilityChanged", old_value=v.old.value, new_value=v.new.value)
    for n in cs.defined_name_changes:
        add("name", location=n.name, kind="NameChanged",
            old_formula=n.old_formula or "", new_formula=n.new_formula or "")
    for l in cs.link_changes:
        add("link", location=f"[{l.index}]", kind="LinkChanged",
            old_value=l.old_target or "", new_value=l.new_target or "")
    if cs.macro_changed:
        add("package", location="xl/vbaProject.bin", kind="MacroChanged")
    if cs.connections_changed:
        add("package", location="xl/connections.xml", kind="ConnectionsChanged")
    for s in cs.structural:
        add("structure", s.sheet, str(s.index), s.kind.value, detail=s.describe())
    for c in cs.cell_changes:
        add(
            "cell", c.addr.sheet, c.addr.local(), c.kind.value,
            "" if c.old_value is None else c.old_value.display(),
            "" if c.new_value is None else c.new_value.display(),
            c.old_formula or "", c.new_formula or "",
        )
    return rows


def _render_text(cs: ChangeSet) -> str:
    if cs.is_empty:
        return "No changes.\n"
    lines = [f"Changes from {cs.old_label} to {cs.new_label}", ""]
    for name in cs.sheets_added:
        lines.append(f"+ sheet {name}")
    for name in cs.sheets_removed:
        lines.append(f"- sheet {name}")
    for r in cs.sheets_renamed:
        lines.append(f"~ sheet {r.old_name} renamed to {r.new_name}")
    for v in cs.visibility_changes:
        lines.append(f"~ sheet {v.sheet} visibility {v.old.value} -> {v.new.value}")
    for n in cs.defined_name_changes:
        lines.append(f"~ name {n.name}: {n.old_formula or '(none)'} -> {n.new_formula or '(none)'}")
    for l in cs.link_changes:
        lines.append(f"~ link [{l.index}]: {l.old_target or '(none)'} -> {l.new_target or '(none)'}")
    if cs.macro_changed:
        lines.append("~ macros changed")
    if cs.connections_changed:
        lines.append("~ data connections changed")

    sheets = sorted({s.sheet for s in cs.structural} | {c.addr.sheet for c in cs.cell_changes})
    for sheet in sheets:
        lines.append("")
        note = " (compared positionally)" if sheet in cs.ambiguous_sheets else ""
        lines.append(f"[{sheet}]{note}")
        for s in cs.structural:
            if s.sheet == sheet:
                lines.append(f"  {s.describe()}")
        for c in cs.cell_changes:
            if c.addr.sheet != sheet:
                continue
            old = _shown(c.old_value, c.old_formula) if c.kind is not ChangeKind.ADDED else ""
            new = _shown(c.new_value, c.new_formula) if c.kind is not ChangeKind.REMOVED else ""
            if c.kind is ChangeKind.ADDED:
                lines.append(f"  {c.addr.local()} {c.kind.value}: {new}")
            elif c.kind is ChangeKind.REMOVED:
                lines.append(f"  {c.addr.local()} {c.kind.value}: {old}")
            else:
                lines.append(f"  {c.addr.local()} {c.kind.value}: {old} -> {new}")
    return "\n".join(lines) + "\n"


def render_change_report(cs: ChangeSet, fmt: str = "text") -> bytes:
    if fmt == "text":
        return _render_text(cs).encode("utf-8")
    if fmt == "json":
        return (json.dumps(cs.to_dict(), indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    if fmt == "csv":
        df = pd.DataFrame(_report_rows(cs), columns=list(REPORT_CSV_COLUMNS), dtype=object)
        buf = io.StringIO()
        df.to_csv(buf, index=False, lineterminator="\r\n")
        return buf.getvalue().encode("utf-8")
    raise ValueError(f"unsupported report format: {fmt}")


# =====================================================================
# NOTIFICATIONS
# =====================================================================

SENDER = "sheetguard@localhost"
_UNSAFE_RE = re.compile(r"[^A-Za-z0-9._-]+")


def _wants(topics: Sequence[str], touched: set[str]) -> bool:
    return "all" in topics or bool(touched & set(topics))


def notify(
    cs: ChangeSet,
    subscriptions: Iterable[tuple[str, Sequence[str]]],
    outbox: str | Path,
    now: datetime | None = None,
) -> list[Path]:
    """
    Write one RFC 5322 message per subscriber whose topics match.

    Args:
        subscriptions: (user, topics); topics from TOPICS or "all"

    Returns:
        written message paths, in filename (timestamp) order

    Raises:
        OutboxUnwritable: the outbox cannot be created or written
    """
    if cs.is_empty:
        return []
    touched = cs.topics()
    recipients = [(user, tuple(topics)) for user, topics in subscriptions if _wants(topics, touched)]
    if not recipients:
        return []

    box = Path(outbox)
    try:
        box.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutboxUnwritable(f"cannot create outbox {box}: {e}") from e

    stamp = (now or datetime.now(timezone.utc)).astimezone(timezone.utc)
    body = _render_text(cs)
    subject_topics = ", ".join(t for t in TOPICS if t in touched)
    written: list[Path] = []
    seq = 0
    for user, _topics in recipients:
        msg = EmailMessage()
        msg["From"] = SENDER
        msg["To"] = user
        msg["Subject"] = f"[SheetGuard] {cs.new_label} changed ({subject_topics})"
        msg["Date"] = format_datetime(stamp)
        msg.set_content(body)
        payload = bytes(msg)
        while True:
            seq += 1
            name = f"{stamp:%Y%m%dT%H%M%S%f}Z-{seq:04d}-{_UNSAFE_RE.sub('_', user)}.eml"
            path = box / name
            try:
                with open(path, "xb") as fh:
                    fh.write(payload)
                break
            except FileExistsError:
                continue
            except OSError as e:
                raise OutboxUnwritable(f"cannot write {path}: {e}") from e
        written.append(path)
        logger.info(f"[NOTIFY] {user}: {path.name}")
    return written
