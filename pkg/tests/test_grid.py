import pytest

from sheetguard.errors import MalformedAddress
from sheetguard.formula import compute_stats
from sheetguard.grid import (
    MAX_COL,
    MAX_ROW,
    Cell,
    CellAddress,
    CellKind,
    CellValue,
    ExternalLink,
    Visibility,
    Workbook,
    Worksheet,
    col_to_letters,
    format_a1,
    letters_to_col,
    parse_a1,
)


class TestColumnLetters:
    @pytest.mark.parametrize("col, letters", [(1, "A"), (26, "Z"), (27, "AA"), (702, "ZZ"), (703, "AAA"), (MAX_COL, "XFD")])
    def test_both_directions(self, col, letters):
        assert col_to_letters(col) == letters
        assert letters_to_col(letters) == col

    def test_lowercase_letters(self):
        assert letters_to_col("ab") == 28


class TestParseA1:
    def test_plain(self):
        addr = parse_a1("B3")
        assert (addr.row, addr.col, addr.sheet) == (3, 2, "")
        assert not addr.row_abs and not addr.col_abs

    def test_absolute_markers(self):
        addr = parse_a1("$C$10")
        assert addr.row_abs and addr.col_abs
        assert format_a1(addr) == "$C$10"

    def test_sheet_prefix(self):
        addr = parse_a1("Data!A1")
        assert addr.sheet == "Data"

    def test_quoted_sheet_with_escaped_quote(self):
        addr = parse_a1("'Bob''s Sheet'!D4")
        assert addr.sheet == "Bob's Sheet"
        assert format_a1(addr) == "'Bob''s Sheet'!D4"

    def test_last_cell(self):
        addr = parse_a1("XFD1048576")
        assert (addr.row, addr.col) == (MAX_ROW, MAX_COL)

    @pytest.mark.parametrize("text", ["", "A0", "1A", "XFE1", "A1048577", "AAAA1", "Sheet 1!A1"])
    def test_rejects(self, text):
        with pytest.raises(MalformedAddress):
            parse_a1(text)

    def test_direct_construction_checks_bounds(self):
        with pytest.raises(MalformedAddress):
            CellAddress(0, 1)


class TestCellValue:
    def test_of(self):
        assert CellValue.of(None).is_empty
        assert CellValue.of(True).kind is CellKind.BOOLEAN
        assert CellValue.of(3).number == 3.0
        assert CellValue.of("#N/A").kind is CellKind.ERROR
        assert CellValue.of("hello").kind is CellKind.TEXT

    def test_error_must_be_literal(self):
        with pytest.raises(ValueError):
            CellValue(CellKind.ERROR, text="#OOPS")

    def test_display(self):
        assert CellValue.of(5.0).display() == "5"
        assert CellValue.of(2.5).display() == "2.5"
        assert CellValue.of(False).display() == "FALSE"
        assert CellValue.of(None).display() == ""


def _cell(ref, value=None, formula=None, sheet="S"):
    a = parse_a1(ref)
    return Cell(CellAddress(a.row, a.col, sheet), CellValue.of(value), formula)


class TestWorkbook:
    def test_duplicate_sheet_names(self):
        with pytest.raises(ValueError):
            Workbook("u", (Worksheet("A"), Worksheet("A")))

    def test_needs_a_visible_sheet(self):
        with pytest.raises(ValueError):
            Workbook("u", (Worksheet("A", Visibility.HIDDEN),))

    def test_link_indices_contiguous(self):
        with pytest.raises(ValueError):
            Workbook("u", (Worksheet("A"),), external_links=(ExternalLink(2, "x.xlsx"),))

    def test_visibility_from_ooxml(self):
        assert Visibility.from_ooxml("veryHidden") is Visibility.VERY_HIDDEN
        assert Visibility.from_ooxml(None) is Visibility.VISIBLE

    def test_worksheet_extent(self):
        ws = Worksheet.build("S", [_cell("C2", 1), _cell("A7", 2)])
        assert (ws.max_row, ws.max_col) == (7, 3)
        assert [c.addr.local() for c in ws.sorted_cells()] == ["C2", "A7"]


class TestComputeStats:
    def test_counts_hidden_sheets_and_functions(self):
        visible = Worksheet.build("S", [
            _cell("A1", 1),
            _cell("A2", 2, "sum(A1)"),
            _cell("A3", "#DIV/0!", "A1/0"),
        ])
        hidden = Worksheet.build("H", [_cell("B1", 3, "SUM(A1)+MAX(A1)", sheet="H")], Visibility.VERY_HIDDEN)
        wb = Workbook("u", (visible, hidden), external_links=(ExternalLink(1, "x.xlsx"),), has_macros=True)
        stats = compute_stats(wb)
        assert stats.sheet_count == 2
        assert stats.formula_count == 3
        assert stats.unique_function_count == 2
        assert stats.error_cell_count == 1
        assert stats.external_link_count == 1
        assert stats.has_macros

    def test_empty_workbook(self):
        stats = compute_stats(Workbook("u", (Worksheet("S"),)))
        assert stats.formula_count == 0 and stats.unique_function_count == 0
