import hashlib
import io
import zipfile

import pytest

from sheetguard.errors import CorruptPart, NotAPackage, NotASpreadsheet
from sheetguard.grid import CellKind, LinkMode, Visibility
from sheetguard.ooxml import list_link_targets, read_package, rewrite_links, summarize_package

from conftest import NS_MAIN, XML_DECL


def _replace_part(data: bytes, part: str, payload: str | bytes) -> bytes:
    src = zipfile.ZipFile(io.BytesIO(data))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as dst:
        for info in src.infolist():
            body = src.read(info.filename)
            if info.filename == part:
                body = payload.encode("utf-8") if isinstance(payload, str) else payload
            dst.writestr(info.filename, body)
    return buf.getvalue()


class TestReadPackage:
    def test_cells(self, make_xlsx):
        data = make_xlsx({"Data": {
            "A1": 2,
            "A2": ("=A1*2", 4),
            "B1": "label",
            "B2": True,
            "C1": "#N/A",
            "C2": "=A1+A2",
            "D1": ("=B1&\"!\"", "label!"),
        }})
        ws = read_package(data, "file:///x.xlsx").sheet("Data")
        assert ws.get(1, 1).value.number == 2.0
        assert ws.get(2, 1).formula == "A1*2"
        assert ws.get(2, 1).value.number == 4.0
        assert ws.get(1, 2).value.text == "label"
        assert ws.get(2, 2).value.boolean is True
        assert ws.get(1, 3).value.kind is CellKind.ERROR
        assert ws.get(2, 3).formula == "A1+A2"
        assert ws.get(2, 3).value.is_empty
        assert ws.get(1, 4).value.text == "label!"
        assert ws.get(1, 1).addr.sheet == "Data"

    def test_sheet_order_and_visibility(self, make_xlsx):
        data = make_xlsx({"A": {}, "B": {}, "C": {}}, states={"B": "hidden", "C": "veryHidden"})
        wb = read_package(data)
        assert [s.name for s in wb.sheets] == ["A", "B", "C"]
        assert [s.visibility for s in wb.sheets] == [
            Visibility.VISIBLE, Visibility.HIDDEN, Visibility.VERY_HIDDEN,
        ]

    def test_defined_names(self, make_xlsx):
        wb = read_package(make_xlsx(defined_names=[("Rate", "Sheet1!$B$1")]))
        assert wb.defined_names == (("Rate", "Sheet1!$B$1"),)

    def test_external_links(self, make_xlsx):
        data = make_xlsx(links=["rates.xlsx", "\\\\srv\\share\\fx.xlsx"])
        wb = read_package(data)
        assert [(l.index, l.target) for l in wb.external_links] == [
            (1, "rates.xlsx"), (2, "\\\\srv\\share\\fx.xlsx"),
        ]
        assert list_link_targets(data)[0] == (1, "rates.xlsx", LinkMode.EXTERNAL)

    def test_macros_and_connections(self, make_xlsx):
        vba = b"\xd0\xcf\x11\xe0 fake vba"
        wb = read_package(make_xlsx(vba=vba, connections=f"{XML_DECL}<connections xmlns=\"{NS_MAIN}\"/>"))
        assert wb.has_macros and wb.has_connections
        assert wb.vba_sha256 == hashlib.sha256(vba).hexdigest()
        summary = summarize_package(make_xlsx(vba=vba))
        assert summary.has_vba_part and not summary.has_connections_part

    def test_core_properties(self, make_xlsx):
        wb = read_package(make_xlsx(
            creator="Dana", created="2023-01-02T03:04:05Z", modified="2023-02-01T00:00:00Z",
        ))
        assert wb.creator == "Dana"
        assert wb.created.year == 2023 and wb.created.tzinfo is not None
        assert wb.modified > wb.created

    def test_shared_formula_translated(self, make_xlsx):
        sheet = (
            f'{XML_DECL}<worksheet xmlns="{NS_MAIN}"><sheetData>'
            '<row r="1"><c r="A1"><v>1</v></c><c r="B1"><f t="shared" ref="B1:B3" si="0">A1*2</f><v>2</v></c></row>'
            '<row r="2"><c r="A2"><v>2</v></c><c r="B2"><f t="shared" si="0"/><v>4</v></c></row>'
            '<row r="3"><c r="A3"><v>3</v></c><c r="B3"><f t="shared" si="0"/><v>6</v></c></row>'
            "</sheetData></worksheet>"
        )
        data = _replace_part(make_xlsx({"S": {}}), "xl/worksheets/sheet1.xml", sheet)
        ws = read_package(data).sheet("S")
        assert [ws.get(r, 2).formula for r in (1, 2, 3)] == ["A1*2", "A2*2", "A3*2"]

    def test_inline_string(self, make_xlsx):
        sheet = (
            f'{XML_DECL}<worksheet xmlns="{NS_MAIN}"><sheetData>'
            '<row r="1"><c r="A1" t="inlineStr"><is><t>inline</t></is></c></row>'
            "</sheetData></worksheet>"
        )
        data = _replace_part(make_xlsx({"S": {}}), "xl/worksheets/sheet1.xml", sheet)
        assert read_package(data).sheet("S").get(1, 1).value.text == "inline"


class TestReadErrors:
    def test_not_a_zip(self):
        with pytest.raises(NotAPackage):
            read_package(b"plain text, not a package")

    def test_zip_without_workbook(self):
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w") as zf:
            zf.writestr("[Content_Types].xml", "<Types/>")
            zf.writestr("word/document.xml", "<doc/>")
        with pytest.raises(NotASpreadsheet):
            read_package(buf.getvalue())

    def test_corrupt_sheet_names_part(self, make_xlsx):
        data = _replace_part(make_xlsx({"S": {"A1": 1}}), "xl/worksheets/sheet1.xml", "<worksheet><sheetData>")
        with pytest.raises(CorruptPart) as info:
            read_package(data)
        assert info.value.part == "xl/worksheets/sheet1.xml"

    def test_link_part_without_rels(self, make_xlsx):
        data = make_xlsx(links=["a.xlsx"])
        src = zipfile.ZipFile(io.BytesIO(data))
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w") as dst:
            for info in src.infolist():
                if not info.filename.endswith("externalLink1.xml.rels"):
                    dst.writestr(info.filename, src.read(info.filename))
        with pytest.raises(CorruptPart):
            read_package(buf.getvalue())


class TestRewriteLinks:
    def test_rewrites_only_link_rels(self, make_xlsx):
        data = make_xlsx({"S": {"A1": ("=[1]Rates!A1", 5)}}, links=["C:\\fin\\rates.xlsx", "other.xlsx"])
        new, applied = rewrite_links(data, {"C:/fin/rates.xlsx": "https://dav.example/fin/rates.xlsx"})

        assert applied == [(1, "C:\\fin\\rates.xlsx", "https://dav.example/fin/rates.xlsx")]
        assert [t for _, t, _ in list_link_targets(new)] == ["https://dav.example/fin/rates.xlsx", "other.xlsx"]
        old_zf, new_zf = zipfile.ZipFile(io.BytesIO(data)), zipfile.ZipFile(io.BytesIO(new))
        assert old_zf.namelist() == new_zf.namelist()
        for info in old_zf.infolist():
            if info.filename == "xl/externalLinks/_rels/externalLink1.xml.rels":
                continue
            other = new_zf.getinfo(info.filename)
            assert (other.CRC, other.compress_size) == (info.CRC, info.compress_size)
        assert new_zf.testzip() is None
        assert read_package(new).sheet("S").get(1, 1).formula == "[1]Rates!A1"

    def test_no_match_returns_input(self, make_xlsx):
        data = make_xlsx(links=["a.xlsx"])
        new, applied = rewrite_links(data, {"b.xlsx": "c.xlsx"})
        assert applied == [] and new == data

    def test_no_links(self, make_xlsx):
        data = make_xlsx()
        assert rewrite_links(data, {"a.xlsx": "b.xlsx"}) == (data, [])


class TestLinkInvariants:
    def test_empty_mapping_is_identity(self, make_xlsx):
        data = make_xlsx(links=["file:///C:/finance/revenue.xlsx"])
        assert rewrite_links(data, {}) == (data, [])

    def test_rewrite_is_idempotent(self, make_xlsx):
        data = make_xlsx(links=["file:///C:/finance/revenue.xlsx"])
        mapping = {"file:///C:/finance/revenue.xlsx": "http://sharepoint/repo/finance/revenue.xlsx"}
        once, applied = rewrite_links(data, mapping)
        twice, again = rewrite_links(once, mapping)
        assert applied == [(1, "file:///C:/finance/revenue.xlsx", "http://sharepoint/repo/finance/revenue.xlsx")]
        assert again == [] and twice == once

    def test_only_targets_change(self, make_xlsx):
        data = make_xlsx({"S": {"A1": 5, "B1": "=[1]S!A1"}}, links=["a.xlsx", "b.xlsx"])
        new, _ = rewrite_links(data, {"a.xlsx": "http://h/a.xlsx"})
        before, after = read_package(data), read_package(new)
        assert before.sheets == after.sheets
        assert before.defined_names == after.defined_names
        assert [l.target for l in after.external_links] == ["http://h/a.xlsx", "b.xlsx"]

    def test_fast_path_matches_full_read(self, make_xlsx):
        data = make_xlsx(links=["a.xlsx", "sub/b.xlsx"])
        wb = read_package(data)
        assert list_link_targets(data) == [(l.index, l.target, l.mode) for l in wb.external_links]
        assert list_link_targets(make_xlsx()) == []
