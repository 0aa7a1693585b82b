"""
FORMULA Module
---------------------------------------------------------
Lexical scanner for A1-style formulas and the R1C1 normalizer built on it.

The scanner is not a grammar: it recognizes string literals, quoted and
unquoted sheet prefixes, workbook indexes ([1]), error literals, cell
references, whole-row/column ranges, numbers and identifiers. Every
other character is passed through untouched. Reference geometry is all
that consistency detection needs.

3-D references (Sheet1:Sheet3!A1) and structured table references
(Table1[Col]) are left unrewritten and flag the formula as unanalyzable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import NamedTuple

from sheetguard.errors import MalformedFormula
from sheetguard.grid import (
    MAX_COL,
    MAX_ROW,
    CellAddress,
    CellKind,
    Workbook,
    WorkbookStats,
    col_to_letters,
    letters_to_col,
)

# Token kinds
STRING = "string"
ERROR = "error"
REF = "ref"
COL_RANGE = "col_range"
ROW_RANGE = "row_range"
PREFIX = "prefix"
BOOK = "book"
FUNC = "func"
IDENT = "ident"
NUMBER = "number"
SPACE = "space"
OTHER = "other"

_REF_RE = re.compile(r"(\$?)([A-Za-z]{1,3})(\$?)([0-9]+)")
_COL_RANGE_RE = re.compile(r"(\$?)([A-Za-z]{1,3}):(\$?)([A-Za-z]{1,3})")
_ROW_RANGE_RE = re.compile(r"(\$?)([0-9]+):(\$?)([0-9]+)")
_NUMBER_RE = re.compile(r"[0-9]+(?:\.[0-9]*)?(?:[eE][+-]?[0-9]+)?|\.[0-9]+")
_IDENT_RE = re.compile(r"[A-Za-z_\\][\w.]*")
_THREE_D_TAIL_RE = re.compile(r":[A-Za-z_\\][\w.]*!")
_ERROR_RE = re.compile(
    r"#(?:DIV/0!|N/A|NAME\?|NULL!|NUM!|REF!|VALUE!|GETTING_DATA|SPILL!|CALC!)"
)
_WORD_CHAR_RE = re.compile(r"[\w.(!]")


class Token(NamedTuple):
    kind: str
    text: str
    pos: int


@dataclass(frozen=True)
class Tokenized:
    tokens: tuple[Token, ...]
    analyzable: bool


@dataclass(frozen=True)
class NormalizedFormula:
    text: str
    analyzable: bool


# =====================================================================
# SCANNER
# =====================================================================

def _scan_quoted(formula: str, i: int, quote: str) -> int:
    """Return the index just past the closing quote ('' / "" are escapes)."""
    j = i + 1
    n = len(formula)
    while j < n:
        if formula[j] == quote:
            if j + 1 < n and formula[j + 1] == quote:
                j += 2
                continue
            return j + 1
        j += 1
    raise MalformedFormula(formula, i, "unterminated quote")


def _scan_bracket(formula: str, i: int) -> int:
    depth = 0
    for j in range(i, len(formula)):
        if formula[j] == "[":
            depth += 1
        elif formula[j] == "]":
            depth -= 1
            if depth == 0:
                return j + 1
    raise MalformedFormula(formula, i, "unbalanced '['")


def _valid_cols(*letters: str) -> bool:
    return all(letters_to_col(l) <= MAX_COL for l in letters)


def tokenize(formula: str) -> Tokenized:
    """
    Split a formula into tokens.

    Raises:
        MalformedFormula: unterminated string/sheet quote or unbalanced
            brackets; callers record the cell as unanalyzable.
    """
    tokens: list[Token] = []
    analyzable = True
    i = 0
    n = len(formula)
    while i < n:
        ch = formula[i]

        if ch == '"':
            j = _scan_quoted(formula, i, '"')
            tokens.append(Token(STRING, formula[i:j], i))
            i = j
            continue

        if ch == "'":
            j = _scan_quoted(formula, i, "'")
            if j >= n or formula[j] != "!":
                raise MalformedFormula(formula, i, "quoted sheet name without '!'")
            if ":" in formula[i + 1:j - 1]:
                analyzable = False
            tokens.append(Token(PREFIX, formula[i:j + 1], i))
            i = j + 1
            continue

        if ch == "[":
            j = _scan_bracket(formula, i)
            if tokens and tokens[-1].kind == IDENT and tokens[-1].pos + len(tokens[-1].text) == i:
                # Table1[Column]
                analyzable = False
                tokens.append(Token(OTHER, formula[i:j], i))
            else:
                tokens.append(Token(BOOK, formula[i:j], i))
            i = j
            continue

        if ch == "#":
            m = _ERROR_RE.match(formula, i)
            if m:
                tokens.append(Token(ERROR, m.group(0), i))
                i = m.end()
            else:
                tokens.append(Token(OTHER, ch, i))
                i += 1
            continue

        if ch.isspace():
            j = i
            while j < n and formula[j].isspace():
                j += 1
            tokens.append(Token(SPACE, formula[i:j], i))
            i = j
            continue

        if ch.isdigit() or (ch == "." and i + 1 < n and formula[i + 1].isdigit()):
            m = _ROW_RANGE_RE.match(formula, i)
            if m and int(m.group(2)) <= MAX_ROW and int(m.group(4)) <= MAX_ROW:
                tokens.append(Token(ROW_RANGE, m.group(0), i))
                i = m.end()
                continue
            m = _NUMBER_RE.match(formula, i)
            tokens.append(Token(NUMBER, m.group(0), i))
            i = m.end()
            continue

        if ch == "$" or ch.isalpha() or ch in "_\\":
            m = _COL_RANGE_RE.match(formula, i)
            if (
                m
                and _valid_cols(m.group(2), m.group(4))
                and not _WORD_CHAR_RE.match(formula, m.end())
            ):
                tokens.append(Token(COL_RANGE, m.group(0), i))
                i = m.end()
                continue
            m = _REF_RE.match(formula, i)
            if (
                m
                and _valid_cols(m.group(2))
                and 1 <= int(m.group(4)) <= MAX_ROW
                and not _WORD_CHAR_RE.match(formula, m.end())
            ):
                tokens.append(Token(REF, m.group(0), i))
                i = m.end()
                continue
            m = _IDENT_RE.match(formula, i)
            if m:
                j = m.end()
                if j < n and formula[j] == "!":
                    tokens.append(Token(PREFIX, formula[i:j + 1], i))
                    i = j + 1
                    continue
                tail = _THREE_D_TAIL_RE.match(formula, j)
                if tail:
                    analyzable = False
                    tokens.append(Token(PREFIX, formula[i:tail.end()], i))
                    i = tail.end()
                    continue
                kind = FUNC if j < n and formula[j] == "(" else IDENT
                tokens.append(Token(kind, formula[i:j], i))
                i = j
                continue

        tokens.append(Token(OTHER, ch, i))
        i += 1

    return Tokenized(tuple(tokens), analyzable)


# =====================================================================
# R1C1 NORMALIZATION
# =====================================================================

def _r1c1_part(axis: str, value: int, absolute: bool, origin: int) -> str:
    if absolute:
        return f"{axis}{value}"
    delta = value - origin
    return axis if delta == 0 else f"{axis}[{delta}]"


def _ref_to_r1c1(text: str, origin: CellAddress) -> str:
    cabs, letters, rabs, digits = _REF_RE.fullmatch(text).groups()
    return (
        _r1c1_part("R", int(digits), bool(rabs), origin.row)
        + _r1c1_part("C", letters_to_col(letters), bool(cabs), origin.col)
    )


def _token_to_r1c1(tok: Token, origin: CellAddress) -> str:
    if tok.kind == REF:
        return _ref_to_r1c1(tok.text, origin)
    if tok.kind == COL_RANGE:
        a_abs, a, b_abs, b = _COL_RANGE_RE.fullmatch(tok.text).groups()
        return (
            _r1c1_part("C", letters_to_col(a), bool(a_abs), origin.col)
            + ":"
            + _r1c1_part("C", letters_to_col(b), bool(b_abs), origin.col)
        )
    if tok.kind == ROW_RANGE:
        a_abs, a, b_abs, b = _ROW_RANGE_RE.fullmatch(tok.text).groups()
        return (
            _r1c1_part("R", int(a), bool(a_abs), origin.row)
            + ":"
            + _r1c1_part("R", int(b), bool(b_abs), origin.row)
        )
    if tok.kind == FUNC:
        return tok.text.upper()
    return tok.text


def analyze_formula(formula: str, origin: CellAddress) -> NormalizedFormula:
    """
    Normalize a formula to R1C1 relative to its host cell.

    Unanalyzable formulas (3-D or structured references) come back
    unrewritten with analyzable=False.

    Raises:
        MalformedFormula: the scanner cannot finish.
    """
    scanned = tokenize(formula)
    if not scanned.analyzable:
        return NormalizedFormula(formula, False)
    text = "".join(_token_to_r1c1(tok, origin) for tok in scanned.tokens)
    return NormalizedFormula(text, True)


def normalize_formula_r1c1(formula: str, origin: CellAddress) -> str:
    """
    Rewrite every A1 reference in `formula` to R1C1 relative to `origin`.

    ("A1", B2) -> "R[-1]C[-1]";  ("$A$1", any) -> "R1C1";
    ("SUM(A1:A10)", A11) -> "SUM(R[-10]C:R[-1]C)".
    """
    return analyze_formula(formula, origin).text


# =====================================================================
# TRANSLATION (shared formulas)
# =====================================================================

def _shift_ref(text: str, d_row: int, d_col: int) -> str:
    cabs, letters, rabs, digits = _REF_RE.fullmatch(text).groups()
    col = letters_to_col(letters) + (0 if cabs else d_col)
    row = int(digits) + (0 if rabs else d_row)
    if not (1 <= col <= MAX_COL and 1 <= row <= MAX_ROW):
        return "#REF!"
    return f"{cabs}{col_to_letters(col)}{rabs}{row}"


def translate_formula(formula: str, source: CellAddress, target: CellAddress) -> str:
    """
    Copy a formula from `source` to `target` the way a fill-down does:
    relative components shift, absolute components stay.
    """
    d_row = target.row - source.row
    d_col = target.col - source.col
    if d_row == 0 and d_col == 0:
        return formula
    out = []
    for tok in tokenize(formula).tokens:
        if tok.kind == REF:
            out.append(_shift_ref(tok.text, d_row, d_col))
        elif tok.kind == COL_RANGE:
            a_abs, a, b_abs, b = _COL_RANGE_RE.fullmatch(tok.text).groups()
            ca = letters_to_col(a) + (0 if a_abs else d_col)
            cb = letters_to_col(b) + (0 if b_abs else d_col)
            if 1 <= ca <= MAX_COL and 1 <= cb <= MAX_COL:
                out.append(f"{a_abs}{col_to_letters(ca)}:{b_abs}{col_to_letters(cb)}")
            else:
                out.append("#REF!")
        elif tok.kind == ROW_RANGE:
            a_abs, a, b_abs, b = _ROW_RANGE_RE.fullmatch(tok.text).groups()
            ra = int(a) + (0 if a_abs else d_row)
            rb = int(b) + (0 if b_abs else d_row)
            if 1 <= ra <= MAX_ROW and 1 <= rb <= MAX_ROW:
                out.append(f"{a_abs}{ra}:{b_abs}{rb}")
            else:
                out.append("#REF!")
        else:
            out.append(tok.text)
    return "".join(out)


def function_names(formula: str) -> set[str]:
    """Upper-cased function identifiers, '_xlfn.' prefixes stripped."""
    try:
        tokens = tokenize(formula).tokens
    except MalformedFormula:
        return set()
    names = set()
    for tok in tokens:
        if tok.kind == FUNC:
            name = tok.text.upper()
            for prefix in ("_XLFN.", "_XLWS."):
                if name.startswith(prefix):
                    name = name[len(prefix):]
            names.add(name)
    return names


def compute_stats(wb: Workbook) -> WorkbookStats:
    """
    Count sheets, formulas, links, distinct functions and error cells.

    Hidden and VeryHidden sheets are included. Function identifiers are
    compared case-insensitively.
    """
    formula_count = 0
    error_count = 0
    functions: set[str] = set()
    for ws in wb.sheets:
        for cell in ws.cells.values():
            if cell.formula is not None:
                formula_count += 1
                functions.update(function_names(cell.formula))
            if cell.value.kind is CellKind.ERROR:
                error_count += 1
    return WorkbookStats(
        sheet_count=len(wb.sheets),
        formula_count=formula_count,
        external_link_count=len(wb.external_links),
        unique_function_count=len(functions),
        error_cell_count=error_count,
        has_macros=wb.has_macros,
    )
