from datetime import datetime, timezone

import pytest

from sheetguard.errors import QuerySyntaxError, UnknownField
from sheetguard.query import And, Comparison, Not, Or, evaluate, parse_query

FIELDS = ("risk", "size_bytes", "owner", "modified", "has_macros", "year(modified)", "kind")


def q(text):
    return parse_query(text, FIELDS)


class TestParse:
    def test_single_comparison(self):
        assert q("risk == High") == Comparison("risk", "==", "High", 0)

    def test_or_of_years(self):
        node = q("year(modified) == 2006 OR year(modified) == 2007")
        assert isinstance(node, Or)
        assert [(c.field, c.literal) for c in node.items] == [("year(modified)", 2006), ("year(modified)", 2007)]

    def test_precedence(self):
        node = q("size_bytes > 1 OR owner == 'x' AND NOT risk == Low")
        assert isinstance(node, Or)
        left, right = node.items
        assert isinstance(left, Comparison)
        assert isinstance(right, And)
        assert isinstance(right.items[1], Not)

    def test_parentheses_override(self):
        node = q("(size_bytes > 1 OR owner == 'x') AND risk == Low")
        assert isinstance(node, And) and isinstance(node.items[0], Or)

    def test_literals(self):
        assert q('owner == "a \\"b\\""').literal == 'a "b"'
        assert q("size_bytes >= 1.5").literal == 1.5
        assert q("has_macros == TRUE").literal is True
        assert q("kind contains sheet").op == "contains"

    def test_keywords_case_insensitive(self):
        assert isinstance(q("risk == High or risk == Medium"), Or)

    def test_parenthesized_literal(self):
        with pytest.raises(QuerySyntaxError):
            q("size_bytes > (1)")

    @pytest.mark.parametrize("text", ["", "risk ==", "risk High", "(risk == High", "risk == High)", "NOT"])
    def test_syntax_errors(self, text):
        with pytest.raises(QuerySyntaxError):
            q(text)

    def test_offset_is_in_bytes(self):
        with pytest.raises(QuerySyntaxError) as info:
            q('owner == "é" AND @')
        assert info.value.offset == 18

    def test_unknown_field(self):
        with pytest.raises(UnknownField) as info:
            q("size_bytes > 0 AND colour == 'red'")
        assert info.value.field == "colour"
        assert info.value.offset == 19

    def test_unknown_derived_field(self):
        with pytest.raises(UnknownField):
            q("year(owner) == 2007")


class TestEvaluate:
    RECORD = {
        "risk": "Medium",
        "size_bytes": 2048,
        "owner": "Finance Team",
        "modified": datetime(2007, 3, 1, tzinfo=timezone.utc),
        "year(modified)": 2007,
        "has_macros": False,
        "kind": "Spreadsheet",
    }

    def ev(self, text, record=None):
        record = self.RECORD if record is None else record
        return evaluate(q(text), record.get)

    def test_years(self):
        assert self.ev("year(modified) == 2006 OR year(modified) == 2007")
        assert not self.ev("year(modified) == 2005")

    def test_risk_ordering(self):
        assert self.ev("risk >= Medium")
        assert not self.ev("risk > Medium")

    def test_absent_field_is_false(self):
        assert not self.ev("risk == High", {})
        assert not self.ev("risk != High", {})
        assert self.ev("NOT risk == High", {})

    def test_type_mismatch_is_false(self):
        assert not self.ev("size_bytes > 'big'")
        assert not self.ev("has_macros == 0")

    def test_dates_against_text(self):
        assert self.ev("modified >= '2007-01-01'")
        assert not self.ev("modified < '2007-01-01T00:00:00+00:00'")

    def test_contains_is_case_insensitive(self):
        assert self.ev("owner contains 'finance'")

    def test_trivially_true(self):
        assert self.ev("size_bytes >= 0")
