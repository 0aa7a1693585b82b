"""Shared fixtures: a hand-rolled xlsx builder, a settable clock, a store and a live DAV server."""

from __future__ import annotations

import io
import threading
import zipfile
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

import pytest

from sheetguard.grid import ERROR_LITERALS, parse_a1
from sheetguard.repository import RepositoryStore

NS_MAIN = "http://schemas.openxmlformats.org/spreadsheetml/2006/main"
NS_REL = "http://schemas.openxmlformats.org/officeDocument/2006/relationships"
NS_PKG_REL = "http://schemas.openxmlformats.org/package/2006/relationships"
REL_BASE = "http://schemas.openxmlformats.org/officeDocument/2006/relationships"

XML_DECL = '<?xml version="1.0" encoding="UTF-8" standalone="yes"?>\n'


# =====================================================================
# XLSX BUILDER
# =====================================================================

def _cell_xml(ref: str, value, strings: list[str]) -> str:
    """
    value forms:
        None                    skipped
        bool / int / float      literal
        "#DIV/0!" etc.          error literal
        "=A1+1"                 formula without a cached value
        ("=A1+1", cached)       formula with a cached value
        other str               shared string
    """
    formula = None
    if isinstance(value, tuple):
        formula, value = value
    elif isinstance(value, str) and value.startswith("="):
        formula, value = value, None
    f_xml = f"<f>{escape(formula[1:])}</f>" if formula is not None else ""

    if value is None:
        return f'<c r="{ref}">{f_xml}</c>' if f_xml else ""
    if isinstance(value, bool):
        return f'<c r="{ref}" t="b">{f_xml}<v>{int(value)}</v></c>'
    if isinstance(value, (int, float)):
        return f'<c r="{ref}">{f_xml}<v>{value!r}</v></c>'
    if value in ERROR_LITERALS:
        return f'<c r="{ref}" t="e">{f_xml}<v>{escape(value)}</v></c>'
    if formula is not None:
        return f'<c r="{ref}" t="str">{f_xml}<v>{escape(value)}</v></c>'
    if value not in strings:
        strings.append(value)
    return f'<c r="{ref}" t="s"><v>{strings.index(value)}</v></c>'


def _sheet_xml(cells: Mapping[str, object], strings: list[str]) -> str:
    rows: dict[int, list[tuple[int, str]]] = {}
    for ref, value in cells.items():
        addr = parse_a1(ref)
        xml = _cell_xml(addr.local(), value, strings)
        if xml:
            rows.setdefault(addr.row, []).append((addr.col, xml))
    body = "".join(
        f'<row r="{r}">' + "".join(x for _, x in sorted(rows[r])) + "</row>"
        for r in sorted(rows)
    )
    return f'{XML_DECL}<worksheet xmlns="{NS_MAIN}"><sheetData>{body}</sheetData></worksheet>'


def build_xlsx(
    sheets: Mapping[str, Mapping[str, object]] | None = None,
    *,
    states: Mapping[str, str] | None = None,
    links: Sequence[str] = (),
    defined_names: Sequence[tuple[str, str]] = (),
    vba: bytes | None = None,
    connections: str | None = None,
    creator: str = "",
    created: str | None = None,
    modified: str | None = None,
) -> bytes:
    """Assemble a minimal but valid SpreadsheetML package in memory."""
    sheets = sheets if sheets is not None else {"Sheet1": {}}
    states = states or {}
    strings: list[str] = []
    parts: dict[str, str | bytes] = {}

    sheet_entries = []
    rels = []
    for n, (name, cells) in enumerate(sheets.items(), start=1):
        parts[f"xl/worksheets/sheet{n}.xml"] = _sheet_xml(cells, strings)
        state = f' state="{states[name]}"' if name in states else ""
        sheet_entries.append(f"<sheet name={quoteattr(name)} sheetId=\"{n}\"{state} r:id=\"rId{n}\"/>")
        rels.append(f'<Relationship Id="rId{n}" Type="{REL_BASE}/worksheet" Target="worksheets/sheet{n}.xml"/>')

    next_id = len(rels) + 1
    rels.append(f'<Relationship Id="rId{next_id}" Type="{REL_BASE}/sharedStrings" Target="sharedStrings.xml"/>')
    for i, target in enumerate(links, start=1):
        rid = next_id + i
        rels.append(f'<Relationship Id="rId{rid}" Type="{REL_BASE}/externalLink" Target="externalLinks/externalLink{i}.xml"/>')
        parts[f"xl/externalLinks/externalLink{i}.xml"] = (
            f'{XML_DECL}<externalLink xmlns="{NS_MAIN}" xmlns:r="{NS_REL}">'
            f'<externalBook r:id="rId1"/></externalLink>'
        )
        parts[f"xl/externalLinks/_rels/externalLink{i}.xml.rels"] = (
            f'{XML_DECL}<Relationships xmlns="{NS_PKG_REL}">'
            f'<Relationship Id="rId1" Type="{REL_BASE}/externalLinkPath" '
            f'Target={quoteattr(target)} TargetMode="External"/></Relationships>'
        )

    names_xml = ""
    if defined_names:
        names_xml = "<definedNames>" + "".join(
            f"<definedName name={quoteattr(n)}>{escape(ref)}</definedName>" for n, ref in defined_names
        ) + "</definedNames>"
    parts["xl/workbook.xml"] = (
        f'{XML_DECL}<workbook xmlns="{NS_MAIN}" xmlns:r="{NS_REL}">'
        f"<sheets>{''.join(sheet_entries)}</sheets>{names_xml}</workbook>"
    )
    parts["xl/_rels/workbook.xml.rels"] = (
        f'{XML_DECL}<Relationships xmlns="{NS_PKG_REL}">{"".join(rels)}</Relationships>'
    )
    parts["xl/sharedStrings.xml"] = (
        f'{XML_DECL}<sst xmlns="{NS_MAIN}" count="{len(strings)}" uniqueCount="{len(strings)}">'
        + "".join(f"<si><t>{escape(s)}</t></si>" for s in strings)
        + "</sst>"
    )
    if vba is not None:
        parts["xl/vbaProject.bin"] = vba
    if connections is not None:
        parts["xl/connections.xml"] = connections
    if creator or created or modified:
        parts["docProps/core.xml"] = (
            f'{XML_DECL}<cp:coreProperties '
            f'xmlns:cp="http://schemas.openxmlformats.org/package/2006/metadata/core-properties" '
            f'xmlns:dc="http://purl.org/dc/elements/1.1/" xmlns:dcterms="http://purl.org/dc/terms/">'
            + (f"<dc:creator>{escape(creator)}</dc:creator>" if creator else "")
            + (f"<dcterms:created>{created}</dcterms:created>" if created else "")
            + (f"<dcterms:modified>{modified}</dcterms:modified>" if modified else "")
            + "</cp:coreProperties>"
        )
    parts["[Content_Types].xml"] = (
        f'{XML_DECL}<Types xmlns="http://schemas.openxmlformats.org/package/2006/content-types">'
        '<Default Extension="xml" ContentType="application/xml"/>'
        '<Default Extension="rels" ContentType="application/vnd.openxmlformats-package.relationships+xml"/>'
        '<Override PartName="/xl/workbook.xml" '
        'ContentType="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet.main+xml"/>'
        "</Types>"
    )

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in ["[Content_Types].xml"] + sorted(p for p in parts if p != "[Content_Types].xml"):
            data = parts[name]
            zf.writestr(name, data.encode("utf-8") if isinstance(data, str) else data)
    return buf.getvalue()


@pytest.fixture
def make_xlsx():
    return build_xlsx


@pytest.fixture
def write_xlsx():
    def _write(path: str | Path, sheets=None, **kwargs) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(build_xlsx(sheets, **kwargs))
        return path
    return _write


# =====================================================================
# CLOCK / STORE
# =====================================================================

class FakeClock:
    def __init__(self, start: datetime | None = None):
        self.now = start or datetime(2024, 3, 1, 9, 0, tzinfo=timezone.utc)

    def __call__(self) -> datetime:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += timedelta(seconds=seconds)


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def store(tmp_path, clock):
    return RepositoryStore(tmp_path / "store", clock=clock)


# =====================================================================
# DAV SERVER
# =====================================================================

@pytest.fixture
def dav_server(store):
    """Serve `store` on an ephemeral port; yields (base_url, store, users)."""
    from sheetguard.davserver import make_server

    users = {"alice": "secret", "bob": "hunter2"}
    server = make_server(store, "127.0.0.1", 0, users)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    try:
        yield f"http://{host}:{port}", store, users
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)
