"""
QUERY Module
---------------------------------------------------------
Small boolean filter language for inventory searches.

Grammar:
    expr := or
    or   := and ('OR' and)*
    and  := not ('AND' not)*
    not  := 'NOT' not | '(' expr ')' | cmp
    cmp  := field op literal
    op   := '==' | '!=' | '<' | '<=' | '>' | '>=' | 'contains'

Fields are plain identifiers or year(<identifier>). Literals are quoted
text, integers/decimals, true/false, and bare words (High, Medium, Low,
Spreadsheet, ...), which are taken as text.

Evaluation never raises: a comparison against an absent value or a value
of another type is false.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import date, datetime
from typing import Callable, Collection, Union

from sheetguard.errors import QuerySyntaxError, UnknownField

OPERATORS = ("==", "!=", "<=", ">=", "<", ">", "contains")
KEYWORDS = {"AND", "OR", "NOT"}
RISK_ORDER = {"Low": 1, "Medium": 2, "High": 3}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<op>==|!=|<=|>=|<|>)
  | (?P<string>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
  | (?P<number>-?[0-9]+(?:\.[0-9]+)?)
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Comparison:
    field: str
    op: str
    literal: object
    offset: int = 0


@dataclass(frozen=True)
class And:
    items: tuple["Query", ...]


@dataclass(frozen=True)
class Or:
    items: tuple["Query", ...]


@dataclass(frozen=True)
class Not:
    operand: "Query"


Query = Union[Comparison, And, Or, Not]


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    offset: int  # byte offset into the UTF-8 query text


# =====================================================================
# PARSER
# =====================================================================

def _lex(text: str) -> list[_Tok]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        byte_offset = len(text[:pos].encode("utf-8"))
        if not m:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", byte_offset)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Tok(kind, m.group(0), byte_offset))
        pos = m.end()
    tokens.append(_Tok("end", "", len(text.encode("utf-8"))))
    return tokens


def _unescape(quoted: str) -> str:
    return re.sub(r"\\(.)", r"\1", quoted[1:-1])


class _Parser:
    def __init__(self, text: str, fields: Collection[str]):
        self.tokens = _lex(text)
        self.pos = 0
        self.fields = fields

    @property
    def tok(self) -> _Tok:
        return self.tokens[self.pos]

    def _advance(self) -> _Tok:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def _is_keyword(self, word: str) -> bool:
        return self.tok.kind == "word" and self.tok.text.upper() == word

    def parse(self) -> Query:
        node = self._or()
        if self.tok.kind != "end":
            raise QuerySyntaxError(f"unexpected {self.tok.text!r}", self.tok.offset)
        return node

    def _or(self) -> Query:
        items = [self._and()]
        while self._is_keyword("OR"):
            self._advance()
            items.append(self._and())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def _and(self) -> Query:
        items = [self._not()]
        while self._is_keyword("AND"):
            self._advance()
            items.append(self._not())
        return items[0] if len(items) == 1 else And(tuple(items))

    def _not(self) -> Query:
        if self._is_keyword("NOT"):
            self._advance()
            return Not(self._not())
        if self.tok.kind == "lparen":
            self._advance()
            node = self._or()
            if self.tok.kind != "rparen":
                raise QuerySyntaxError("expected ')'", self.tok.offset)
            self._advance()
            return node
        return self._cmp()

    def _field(self) -> tuple[str, int]:
        tok = self.tok
        if tok.kind != "word" or tok.text.upper() in KEYWORDS:
            raise QuerySyntaxError("expected a field name", tok.offset)
        self._advance()
        name = tok.text
        if self.tok.kind == "lparen":
            # derived field, e.g. year(modified)
            self._advance()
            inner = self.tok
            if inner.kind != "word":
                raise QuerySyntaxError("expected a field name", inner.offset)
            self._advance()
            if self.tok.kind != "rparen":
                raise QuerySyntaxError("expected ')'", self.tok.offset)
            self._advance()
            name = f"{name}({inner.text})"
        if name not in self.fields:
            raise UnknownField(name, tok.offset)
        return name, tok.offset

    def _cmp(self) -> Comparison:
        field, offset = self._field()
        tok = self.tok
        if tok.kind == "op":
            op = tok.text
        elif tok.kind == "word" and tok.text.lower() == "contains":
            op = "contains"
        else:
            raise QuerySyntaxError("expected a comparison operator", tok.offset)
        self._advance()
        return Comparison(field, op, self._literal(), offset)

    def _literal(self) -> object:
        tok = self.tok
        if tok.kind == "string":
            value: object = _unescape(tok.text)
        elif tok.kind == "number":
            value = float(tok.text) if "." in tok.text else int(tok.text)
        elif tok.kind == "word" and tok.text.upper() not in KEYWORDS:
            lowered = tok.text.lower()
            value = {"true": True, "false": False}.get(lowered, tok.text)
        else:
            raise QuerySyntaxError("expected a literal", tok.offset)
        self._advance()
        return value


def parse_query(text: str, fields: Collection[str]) -> Query:
    """
    Parse query text against a field catalog.

    Raises:
        QuerySyntaxError: with the byte offset of the offending token
        UnknownField: naming the identifier outside the catalog
    """
    return _Parser(text, fields).parse()


# =====================================================================
# EVALUATION
# =====================================================================

def _coerce(value: object, literal: object) -> tuple[object, object] | None:
    """Bring value and literal to one comparable type, or None."""
    if isinstance(value, bool) or isinstance(literal, bool):
        if isinstance(value, bool) and isinstance(literal, bool):
            return value, literal
        return None
    if isinstance(value, (int, float)) and isinstance(literal, (int, float)):
        return value, literal
    if isinstance(value, (datetime, date)) and isinstance(literal, str):
        try:
            parsed = datetime.fromisoformat(literal)
        except ValueError:
            return None
        if isinstance(value, datetime):
            if (value.tzinfo is None) != (parsed.tzinfo is None):
                parsed = parsed.replace(tzinfo=value.tzinfo)
            return value, parsed
        return value, parsed.date()
    if isinstance(value, str) and isinstance(literal, str):
        if value in RISK_ORDER and literal in RISK_ORDER:
            return RISK_ORDER[value], RISK_ORDER[literal]
        return value, literal
    return None


def _compare(value: object, op: str, literal: object) -> bool:
    if value is None:
        return False
    if op == "contains":
        return str(literal).lower() in str(value).lower()
    pair = _coerce(value, literal)
    if pair is None:
        return False
    left, right = pair
    try:
        if op == "==":
            return left == right
        if op == "!=":
            return left != right
        if op == "<":
            return left < right
        if op == "<=":
            return left <= right
        if op == ">":
            return left > right
        if op == ">=":
            return left >= right
    except TypeError:
        return False
    return False


def evaluate(q: Query, lookup: Callable[[str], object]) -> bool:
    """Evaluate a parsed query; `lookup` returns a field value or None."""
    if isinstance(q, Comparison):
        return _compare(lookup(q.field), q.op, q.literal)
    if isinstance(q, And):
        return all(evaluate(item, lookup) for item in q.items)
    if isinstance(q, Or):
        return any(evaluate(item, lookup) for item in q.items)
    if isinstance(q, Not):
        return not evaluate(q.operand, lookup)
    raise TypeError(f"not a query node: {q!r}")
