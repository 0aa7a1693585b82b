"""
GRID Module
---------------------------------------------------------
Language-neutral model of a parsed workbook plus the A1 address codec
every other module consumes.

Implements:
  - CellAddress / CellValue / Cell / Worksheet / Workbook types
  - A1 parsing and formatting (quoted sheet names, '$' markers)
  - Workbook statistics (sheets, formulas, links, functions, errors)

All types are immutable after construction and safe to share.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Iterable, Iterator, Mapping

from sheetguard.errors import MalformedAddress

# OOXML grid bounds
MAX_ROW = 1_048_576
MAX_COL = 16_384

ERROR_LITERALS = frozenset({
    "#DIV/0!", "#N/A", "#NAME?", "#NULL!", "#NUM!", "#REF!", "#VALUE!",
})


# =====================================================================
# ADDRESSES
# =====================================================================

_A1_RE = re.compile(
    r"""^
    (?:(?:'(?P<qsheet>(?:[^']|'')+)'|(?P<sheet>\w+))!)?
    (?P<cabs>\$?)(?P<col>[A-Za-z]{1,3})
    (?P<rabs>\$?)(?P<row>[0-9]+)
    $""",
    re.VERBOSE,
)

_PLAIN_SHEET_RE = re.compile(r"\w+")


def col_to_letters(col: int) -> str:
    """1 -> 'A', 26 -> 'Z', 27 -> 'AA'."""
    letters = []
    while col > 0:
        col, rem = divmod(col - 1, 26)
        letters.append(chr(ord("A") + rem))
    return "".join(reversed(letters))


def letters_to_col(letters: str) -> int:
    col = 0
    for ch in letters.upper():
        col = col * 26 + (ord(ch) - ord("A") + 1)
    return col


def quote_sheet(sheet: str) -> str:
    """Quote a sheet name for use in a reference when it needs it."""
    if _PLAIN_SHEET_RE.fullmatch(sheet):
        return sheet
    return "'" + sheet.replace("'", "''") + "'"


@dataclass(frozen=True, order=True)
class CellAddress:
    row: int
    col: int
    sheet: str = ""
    row_abs: bool = False
    col_abs: bool = False

    def __post_init__(self):
        if not 1 <= self.row <= MAX_ROW:
            raise MalformedAddress(f"row {self.row}", "row out of grid bounds")
        if not 1 <= self.col <= MAX_COL:
            raise MalformedAddress(f"col {self.col}", "column out of grid bounds")

    @property
    def key(self) -> tuple[int, int]:
        return (self.row, self.col)

    def local(self) -> str:
        """Relative A1 text without sheet or '$' markers, e.g. 'B3'."""
        return f"{col_to_letters(self.col)}{self.row}"

    def __str__(self) -> str:
        return format_a1(self)


def parse_a1(text: str) -> CellAddress:
    """
    Parse A1 notation into a CellAddress.

    Accepts an optional sheet prefix (quoted with '' escapes when it
    contains spaces or punctuation) and optional '$' absolute markers.

    Raises:
        MalformedAddress: bad letters/digits or out-of-bounds row/col.
    """
    m = _A1_RE.match(text.strip())
    if not m:
        raise MalformedAddress(text)
    sheet = m.group("sheet") or ""
    if m.group("qsheet") is not None:
        sheet = m.group("qsheet").replace("''", "'")
    col = letters_to_col(m.group("col"))
    row = int(m.group("row"))
    if not 1 <= col <= MAX_COL or not 1 <= row <= MAX_ROW:
        raise MalformedAddress(text, "address outside the grid")
    return CellAddress(
        row=row,
        col=col,
        sheet=sheet,
        row_abs=bool(m.group("rabs")),
        col_abs=bool(m.group("cabs")),
    )


def format_a1(addr: CellAddress) -> str:
    prefix = f"{quote_sheet(addr.sheet)}!" if addr.sheet else ""
    return (
        f"{prefix}{'$' if addr.col_abs else ''}{col_to_letters(addr.col)}"
        f"{'$' if addr.row_abs else ''}{addr.row}"
    )


# =====================================================================
# VALUES AND CELLS
# =====================================================================

class CellKind(str, Enum):
    EMPTY = "Empty"
    NUMBER = "Number"
    TEXT = "Text"
    BOOLEAN = "Boolean"
    ERROR = "Error"


@dataclass(frozen=True)
class CellValue:
    kind: CellKind = CellKind.EMPTY
    number: float | None = None
    text: str | None = None
    boolean: bool | None = None

    def __post_init__(self):
        if self.kind is CellKind.ERROR and self.text not in ERROR_LITERALS:
            raise ValueError(f"not an OOXML error literal: {self.text!r}")

    @classmethod
    def of(cls, value: object) -> "CellValue":
        """Build a value from a plain Python object (None/bool/number/str)."""
        if value is None:
            return EMPTY
        if isinstance(value, bool):
            return cls(CellKind.BOOLEAN, boolean=value)
        if isinstance(value, (int, float)):
            return cls(CellKind.NUMBER, number=float(value))
        text = str(value)
        if text in ERROR_LITERALS:
            return cls(CellKind.ERROR, text=text)
        return cls(CellKind.TEXT, text=text)

    @classmethod
    def error(cls, literal: str) -> "CellValue":
        return cls(CellKind.ERROR, text=literal)

    @property
    def is_empty(self) -> bool:
        return self.kind is CellKind.EMPTY

    def to_python(self) -> object:
        if self.kind is CellKind.NUMBER:
            return self.number
        if self.kind is CellKind.BOOLEAN:
            return self.boolean
        if self.kind in (CellKind.TEXT, CellKind.ERROR):
            return self.text
        return None

    def display(self) -> str:
        if self.kind is CellKind.NUMBER:
            n = self.number
            return str(int(n)) if float(n).is_integer() and abs(n) < 1e15 else repr(n)
        if self.kind is CellKind.BOOLEAN:
            return "TRUE" if self.boolean else "FALSE"
        if self.kind is CellKind.EMPTY:
            return ""
        return self.text or ""


EMPTY = CellValue()


@dataclass(frozen=True)
class Cell:
    addr: CellAddress
    value: CellValue = EMPTY
    formula: str | None = None
    font_color: str | None = None
    fill_color: str | None = None
    number_format: str | None = None

    @property
    def has_formula(self) -> bool:
        return self.formula is not None


class Visibility(str, Enum):
    VISIBLE = "Visible"
    HIDDEN = "Hidden"
    VERY_HIDDEN = "VeryHidden"

    @classmethod
    def from_ooxml(cls, state: str | None) -> "Visibility":
        return {
            None: cls.VISIBLE,
            "visible": cls.VISIBLE,
            "hidden": cls.HIDDEN,
            "veryHidden": cls.VERY_HIDDEN,
        }.get(state, cls.VISIBLE)


@dataclass(frozen=True)
class Worksheet:
    name: str
    visibility: Visibility = Visibility.VISIBLE
    cells: Mapping[tuple[int, int], Cell] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        name: str,
        cells: Iterable[Cell] = (),
        visibility: Visibility = Visibility.VISIBLE,
    ) -> "Worksheet":
        return cls(name, visibility, {c.addr.key: c for c in cells})

    def get(self, row: int, col: int) -> Cell | None:
        return self.cells.get((row, col))

    @property
    def max_row(self) -> int:
        return max((r for r, _ in self.cells), default=0)

    @property
    def max_col(self) -> int:
        return max((c for _, c in self.cells), default=0)

    def sorted_cells(self) -> list[Cell]:
        return [self.cells[k] for k in sorted(self.cells)]

    def formula_cells(self) -> Iterator[Cell]:
        return (c for c in self.sorted_cells() if c.formula is not None)


# =====================================================================
# WORKBOOK
# =====================================================================

class LinkMode(str, Enum):
    EXTERNAL = "External"
    INTERNAL = "Internal"


@dataclass(frozen=True)
class ExternalLink:
    index: int
    target: str
    mode: LinkMode = LinkMode.EXTERNAL


@dataclass(frozen=True)
class Workbook:
    source_uri: str
    sheets: tuple[Worksheet, ...]
    defined_names: tuple[tuple[str, str], ...] = ()
    external_links: tuple[ExternalLink, ...] = ()
    has_macros: bool = False
    has_connections: bool = False
    created: datetime | None = None
    modified: datetime | None = None
    creator: str = ""
    last_modified_by: str = ""
    vba_sha256: str | None = None
    connections_sha256: str | None = None

    def __post_init__(self):
        names = [ws.name for ws in self.sheets]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate sheet names: {names}")
        if self.sheets and not any(
            ws.visibility is Visibility.VISIBLE for ws in self.sheets
        ):
            raise ValueError("a workbook needs at least one visible sheet")
        indices = [link.index for link in self.external_links]
        if indices != list(range(1, len(indices) + 1)):
            raise ValueError(f"external link indices not contiguous: {indices}")

    def sheet(self, name: str) -> Worksheet | None:
        for ws in self.sheets:
            if ws.name == name:
                return ws
        return None

    def content_key(self) -> tuple:
        """Everything change-audit compares; metadata and styles excluded."""
        return (
            tuple(
                (
                    ws.name,
                    ws.visibility,
                    tuple(
                        (k, c.value, c.formula) for k, c in sorted(ws.cells.items())
                    ),
                )
                for ws in sorted(self.sheets, key=lambda s: s.name)
            ),
            tuple(sorted(self.defined_names)),
            tuple((l.index, l.target, l.mode) for l in self.external_links),
            self.vba_sha256,
            self.connections_sha256,
        )


@dataclass(frozen=True)
class WorkbookStats:
    sheet_count: int = 0
    formula_count: int = 0
    external_link_count: int = 0
    unique_function_count: int = 0
    error_cell_count: int = 0
    has_macros: bool = False
