"""
OOXML Module
---------------------------------------------------------
Reads .xlsx / .xlsm packages into the grid model and rewrites
external-link targets in place.

Implements:
  - Package summary (parts, VBA / connections presence, link parts)
  - Full workbook read: sheets + visibility, cells (cached values,
    formulas incl. shared formulas, style colors, number formats),
    defined names, external links, core properties
  - Fast link-target listing without touching sheet XML
  - Link rewriting that edits only external-link relationship Targets;
    untouched ZIP entries are copied raw, byte for byte

Formulas reference external workbooks by index ([1]Sheet1!A1), so
rewriting the relationship Target is all a migration needs; formula
text is never edited.
"""

from __future__ import annotations

import hashlib
import io
import logging
import posixpath
import re
import struct
import zipfile
import zlib
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Mapping

from lxml import etree

from sheetguard.errors import (
    CorruptPart,
    MalformedAddress,
    MalformedFormula,
    NotAPackage,
    NotASpreadsheet,
)
from sheetguard.formula import translate_formula
from sheetguard.grid import (
    EMPTY,
    ERROR_LITERALS,
    Cell,
    CellAddress,
    CellKind,
    CellValue,
    ExternalLink,
    LinkMode,
    Visibility,
    Workbook,
    Worksheet,
    parse_a1,
)
from sheetguard.uris import normalize_target

logger = logging.getLogger(__name__)

NS_MAIN = "http://schemas.openxmlformats.org/spreadsheetml/2006/main"
NS_REL = "http://schemas.openxmlformats.org/officeDocument/2006/relationships"
NS_PKG_REL = "http://schemas.openxmlformats.org/package/2006/relationships"
NS = {
    "m": NS_MAIN,
    "r": NS_REL,
    "pr": NS_PKG_REL,
    "cp": "http://schemas.openxmlformats.org/package/2006/metadata/core-properties",
    "dc": "http://purl.org/dc/elements/1.1/",
    "dcterms": "http://purl.org/dc/terms/",
}

CONTENT_TYPES_PART = "[Content_Types].xml"
WORKBOOK_PART = "xl/workbook.xml"
WORKBOOK_RELS_PART = "xl/_rels/workbook.xml.rels"
SHARED_STRINGS_PART = "xl/sharedStrings.xml"
STYLES_PART = "xl/styles.xml"
CORE_PART = "docProps/core.xml"
VBA_PART = "xl/vbaProject.bin"
CONNECTIONS_PART = "xl/connections.xml"

_EXT_LINK_PART_RE = re.compile(r"^xl/externalLinks/externalLink(\d+)\.xml$")

_XML_PARSER = etree.XMLParser(resolve_entities=False, no_network=True, huge_tree=True)


# =====================================================================
# STYLE CONSTANTS
# =====================================================================

# Default Office theme, in SpreadsheetML theme-index order
# (lt1, dk1, lt2, dk2, accent1..6, hlink, folHlink).
THEME_PALETTE = (
    "FFFFFFFF", "FF000000", "FFEEECE1", "FF1F497D",
    "FF4F81BD", "FFC0504D", "FF9BBB59", "FF8064A2",
    "FF4BACC6", "FFF79646", "FF0000FF", "FF800080",
)

_BASIC_EIGHT = (
    "FF000000", "FFFFFFFF", "FFFF0000", "FF00FF00",
    "FF0000FF", "FFFFFF00", "FFFF00FF", "FF00FFFF",
)
INDEXED_PALETTE = {
    **{i: c for i, c in enumerate(_BASIC_EIGHT)},
    **{i + 8: c for i, c in enumerate(_BASIC_EIGHT)},
    64: "FF000000",  # system foreground
    65: "FFFFFFFF",  # system background
}

BUILTIN_NUMBER_FORMATS = {
    0: "General", 1: "0", 2: "0.00", 3: "#,##0", 4: "#,##0.00",
    9: "0%", 10: "0.00%", 11: "0.00E+00", 12: "# ?/?", 13: "# ??/??",
    14: "mm-dd-yy", 15: "d-mmm-yy", 16: "d-mmm", 17: "mmm-yy",
    18: "h:mm AM/PM", 19: "h:mm:ss AM/PM", 20: "h:mm", 21: "h:mm:ss",
    22: "m/d/yy h:mm", 37: "#,##0 ;(#,##0)", 38: "#,##0 ;[Red](#,##0)",
    39: "#,##0.00;(#,##0.00)", 40: "#,##0.00;[Red](#,##0.00)",
    45: "mm:ss", 46: "[h]:mm:ss", 47: "mmss.0", 48: "##0.0E+0", 49: "@",
}


@dataclass(frozen=True)
class PackageSummary:
    part_names: tuple[str, ...]
    has_vba_part: bool
    has_connections_part: bool
    external_link_parts: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class _CellStyle:
    font_color: str | None = None
    fill_color: str | None = None
    number_format: str | None = None


# =====================================================================
# PACKAGE ACCESS
# =====================================================================

def _open_package(data: bytes) -> zipfile.ZipFile:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except (zipfile.BadZipFile, ValueError, TypeError) as e:
        raise NotAPackage(f"not a ZIP archive: {e}") from e
    names = set(zf.namelist())
    if CONTENT_TYPES_PART not in names:
        raise NotASpreadsheet(f"missing {CONTENT_TYPES_PART}")
    if WORKBOOK_PART not in names:
        raise NotASpreadsheet(f"missing {WORKBOOK_PART}")
    return zf


def _read_part(zf: zipfile.ZipFile, part: str) -> bytes:
    try:
        return zf.read(part)
    except KeyError as e:
        raise CorruptPart(part, "part is missing") from e
    except (zipfile.BadZipFile, zlib.error, EOFError) as e:
        raise CorruptPart(part, f"cannot decompress: {e}") from e


def _parse_part(zf: zipfile.ZipFile, part: str) -> etree._Element:
    raw = _read_part(zf, part)
    try:
        return etree.fromstring(raw, _XML_PARSER)
    except etree.XMLSyntaxError as e:
        raise CorruptPart(part, f"XML parse failure: {e}") from e


def _rels_part_for(part: str) -> str:
    folder, base = posixpath.split(part)
    return posixpath.join(folder, "_rels", base + ".rels")


def _resolve_part(base_folder: str, target: str) -> str:
    if target.startswith("/"):
        return target.lstrip("/")
    return posixpath.normpath(posixpath.join(base_folder, target))


def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _summarize(zf: zipfile.ZipFile) -> PackageSummary:
    names = zf.namelist()
    name_set = set(names)
    link_parts = []
    for name in names:
        m = _EXT_LINK_PART_RE.match(name)
        if m:
            link_parts.append((int(m.group(1)), name))
    pairs = []
    for _, part in sorted(link_parts):
        rels = _rels_part_for(part)
        if rels not in name_set:
            raise CorruptPart(rels, "external link part has no relationships part")
        pairs.append((part, rels))
    return PackageSummary(
        part_names=tuple(names),
        has_vba_part=VBA_PART in name_set,
        has_connections_part=CONNECTIONS_PART in name_set,
        external_link_parts=tuple(pairs),
    )


def summarize_package(data: bytes) -> PackageSummary:
    """List parts and locate macro, connection and external-link parts."""
    return _summarize(_open_package(data))


def _external_links(zf: zipfile.ZipFile, summary: PackageSummary) -> tuple[ExternalLink, ...]:
    links = []
    for index, (_, rels_part) in enumerate(summary.external_link_parts, start=1):
        root = _parse_part(zf, rels_part)
        rels = root.findall("pr:Relationship", NS)
        chosen = None
        for rel in rels:
            if rel.get("Type", "").endswith("externalLinkPath"):
                chosen = rel
                break
        if chosen is None and rels:
            chosen = rels[0]
        if chosen is None or chosen.get("Target") is None:
            raise CorruptPart(rels_part, "no link target relationship")
        mode = (
            LinkMode.EXTERNAL
            if chosen.get("TargetMode") == "External"
            else LinkMode.INTERNAL
        )
        links.append(ExternalLink(index, chosen.get("Target"), mode))
    return tuple(links)


def list_link_targets(data: bytes) -> list[tuple[int, str, LinkMode]]:
    """
    Fast path: external link (index, target, mode) triples in part-index
    order, without parsing any sheet.
    """
    zf = _open_package(data)
    return [(l.index, l.target, l.mode) for l in _external_links(zf, _summarize(zf))]


# =====================================================================
# WORKBOOK PARTS
# =====================================================================

def _workbook_rels(zf: zipfile.ZipFile) -> dict[str, tuple[str, str]]:
    """rId -> (type, resolved part name)"""
    if WORKBOOK_RELS_PART not in zf.namelist():
        return {}
    root = _parse_part(zf, WORKBOOK_RELS_PART)
    out = {}
    for rel in root.iterfind("pr:Relationship", NS):
        if rel.get("TargetMode") == "External":
            continue
        out[rel.get("Id")] = (
            rel.get("Type", ""),
            _resolve_part("xl", rel.get("Target", "")),
        )
    return out


def _read_shared_strings(zf: zipfile.ZipFile, part: str | None) -> list[str]:
    if not part or part not in zf.namelist():
        return []
    root = _parse_part(zf, part)
    strings = []
    for si in root.iterfind("m:si", NS):
        # rich-text runs flattened; phonetic runs (rPh) skipped
        strings.append("".join(t.text or "" for t in si.xpath("./m:t | ./m:r/m:t", namespaces=NS)))
    return strings


def _color(el: etree._Element | None) -> str | None:
    if el is None:
        return None
    rgb = el.get("rgb")
    if rgb:
        rgb = rgb.upper()
        return "FF" + rgb if len(rgb) == 6 else rgb
    theme = el.get("theme")
    if theme is not None and theme.isdigit() and int(theme) < len(THEME_PALETTE):
        return THEME_PALETTE[int(theme)]
    indexed = el.get("indexed")
    if indexed is not None and indexed.isdigit():
        return INDEXED_PALETTE.get(int(indexed))
    return None


def _read_styles(zf: zipfile.ZipFile, part: str | None) -> list[_CellStyle]:
    if not part or part not in zf.namelist():
        return []
    root = _parse_part(zf, part)
    formats = dict(BUILTIN_NUMBER_FORMATS)
    for nf in root.iterfind("m:numFmts/m:numFmt", NS):
        formats[int(nf.get("numFmtId", "0"))] = nf.get("formatCode", "")
    fonts = [_color(f.find("m:color", NS)) for f in root.iterfind("m:fonts/m:font", NS)]
    fills = []
    for fill in root.iterfind("m:fills/m:fill", NS):
        pattern = fill.find("m:patternFill", NS)
        if pattern is not None and pattern.get("patternType") == "solid":
            fills.append(_color(pattern.find("m:fgColor", NS)))
        else:
            fills.append(None)
    styles = []
    for xf in root.iterfind("m:cellXfs/m:xf", NS):
        font_id = int(xf.get("fontId", "0"))
        fill_id = int(xf.get("fillId", "0"))
        fmt = formats.get(int(xf.get("numFmtId", "0")))
        styles.append(_CellStyle(
            font_color=fonts[font_id] if font_id < len(fonts) else None,
            fill_color=fills[fill_id] if fill_id < len(fills) else None,
            number_format=None if fmt in (None, "General") else fmt,
        ))
    return styles


def _inline_text(c: etree._Element) -> str:
    return "".join(t.text or "" for t in c.xpath("./m:is/m:t | ./m:is/m:r/m:t", namespaces=NS))


def _cell_value(c: etree._Element, part: str, shared: list[str]) -> CellValue:
    kind = c.get("t", "n")
    if kind == "inlineStr":
        return CellValue(CellKind.TEXT, text=_inline_text(c))
    raw = c.findtext("m:v", namespaces=NS)
    if raw is None:
        return EMPTY
    try:
        if kind == "s":
            return CellValue(CellKind.TEXT, text=shared[int(raw)])
        if kind == "b":
            return CellValue(CellKind.BOOLEAN, boolean=raw.strip() in ("1", "true"))
        if kind == "e":
            if raw in ERROR_LITERALS:
                return CellValue.error(raw)
            return CellValue(CellKind.TEXT, text=raw)
        if kind in ("str", "d"):
            return CellValue(CellKind.TEXT, text=raw)
        return CellValue(CellKind.NUMBER, number=float(raw))
    except (ValueError, IndexError) as e:
        raise CorruptPart(part, f"bad cell value {raw!r} in {c.get('r')}: {e}") from e


def _read_sheet(
    zf: zipfile.ZipFile,
    part: str,
    name: str,
    visibility: Visibility,
    shared: list[str],
    styles: list[_CellStyle],
) -> Worksheet:
    root = _parse_part(zf, part)
    cells: dict[tuple[int, int], Cell] = {}
    shared_masters: dict[str, tuple[str, CellAddress]] = {}
    row_no = 0
    for row_el in root.iterfind("m:sheetData/m:row", NS):
        row_no = int(row_el.get("r")) if row_el.get("r") else row_no + 1
        col_no = 0
        for c in row_el.iterfind("m:c", NS):
            try:
                if c.get("r"):
                    parsed = parse_a1(c.get("r"))
                    addr = CellAddress(parsed.row, parsed.col, name)
                else:
                    addr = CellAddress(row_no, col_no + 1, name)
            except MalformedAddress as e:
                raise CorruptPart(part, str(e)) from e
            col_no = addr.col

            formula = None
            f = c.find("m:f", NS)
            if f is not None:
                formula = f.text or ""
                if f.get("t") == "shared" and f.get("si") is not None:
                    si = f.get("si")
                    if f.text:
                        shared_masters[si] = (f.text, addr)
                    elif si in shared_masters:
                        master_text, master_addr = shared_masters[si]
                        try:
                            formula = translate_formula(master_text, master_addr, addr)
                        except MalformedFormula:
                            formula = master_text
                    else:
                        logger.debug(f"[PARSE] shared formula {si} used before its master in {part}")

            value = _cell_value(c, part, shared)
            if value.is_empty and formula is None:
                continue

            style = _CellStyle()
            s = c.get("s")
            if s is not None and s.isdigit() and int(s) < len(styles):
                style = styles[int(s)]
            cells[addr.key] = Cell(
                addr=addr,
                value=value,
                formula=formula,
                font_color=style.font_color,
                fill_color=style.fill_color,
                number_format=style.number_format,
            )
    return Worksheet(name, visibility, cells)


def _parse_w3cdtf(text: str | None) -> datetime | None:
    if not text:
        return None
    try:
        value = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError:
        return None
    return value if value.tzinfo else value.replace(tzinfo=timezone.utc)


def _read_core(zf: zipfile.ZipFile) -> dict:
    if CORE_PART not in zf.namelist():
        return {}
    root = _parse_part(zf, CORE_PART)
    return {
        "created": _parse_w3cdtf(root.findtext("dcterms:created", namespaces=NS)),
        "modified": _parse_w3cdtf(root.findtext("dcterms:modified", namespaces=NS)),
        "creator": root.findtext("dc:creator", namespaces=NS) or "",
        "last_modified_by": root.findtext("cp:lastModifiedBy", namespaces=NS) or "",
    }


def read_package(data: bytes, source_uri: str = "") -> Workbook:
    """
    Parse an OOXML spreadsheet package.

    Args:
        data: raw package bytes
        source_uri: where the bytes came from (recorded on the Workbook)

    Returns:
        Workbook with sheets, cells, defined names, external links and
        core properties.

    Raises:
        NotAPackage: not a ZIP archive
        NotASpreadsheet: missing [Content_Types].xml or xl/workbook.xml
        CorruptPart: XML parse failure (names the part)
    """
    zf = _open_package(data)
    summary = _summarize(zf)
    rels = _workbook_rels(zf)

    def _rel_part(suffix: str, default: str) -> str | None:
        for rel_type, target in rels.values():
            if rel_type.endswith(suffix):
                return target
        return default if default in zf.namelist() else None

    shared = _read_shared_strings(zf, _rel_part("/sharedStrings", SHARED_STRINGS_PART))
    styles = _read_styles(zf, _rel_part("/styles", STYLES_PART))

    wb_root = _parse_part(zf, WORKBOOK_PART)
    sheets = []
    sheet_names = []
    for sheet_el in wb_root.iterfind("m:sheets/m:sheet", NS):
        name = sheet_el.get("name", "")
        rid = sheet_el.get(f"{{{NS_REL}}}id")
        visibility = Visibility.from_ooxml(sheet_el.get("state"))
        sheet_names.append(name)
        part = rels.get(rid, ("", ""))[1]
        if not part or part not in zf.namelist():
            # chartsheets and dialog sheets carry no cells
            if part and "chartsheet" in rels[rid][0]:
                sheets.append(Worksheet(name, visibility, {}))
                continue
            raise CorruptPart(WORKBOOK_PART, f"sheet {name!r} has no part")
        if "worksheet" not in rels[rid][0]:
            sheets.append(Worksheet(name, visibility, {}))
            continue
        sheets.append(_read_sheet(zf, part, name, visibility, shared, styles))

    defined_names = []
    for dn in wb_root.iterfind("m:definedNames/m:definedName", NS):
        dn_name = dn.get("name", "")
        local = dn.get("localSheetId")
        if local is not None and local.isdigit() and int(local) < len(sheet_names):
            dn_name = f"{sheet_names[int(local)]}!{dn_name}"
        defined_names.append((dn_name, dn.text or ""))

    core = _read_core(zf)
    vba_hash = _sha256(_read_part(zf, VBA_PART)) if summary.has_vba_part else None
    conn_hash = (
        _sha256(_read_part(zf, CONNECTIONS_PART)) if summary.has_connections_part else None
    )

    try:
        wb = Workbook(
            source_uri=source_uri,
            sheets=tuple(sheets),
            defined_names=tuple(defined_names),
            external_links=_external_links(zf, summary),
            has_macros=summary.has_vba_part,
            has_connections=summary.has_connections_part,
            created=core.get("created"),
            modified=core.get("modified"),
            creator=core.get("creator", ""),
            last_modified_by=core.get("last_modified_by", ""),
            vba_sha256=vba_hash,
            connections_sha256=conn_hash,
        )
    except ValueError as e:
        raise CorruptPart(WORKBOOK_PART, str(e)) from e

    if wb.created and wb.modified and wb.modified < wb.created:
        logger.warning(f"[WARN] {source_uri or 'package'}: modified precedes created")
    return wb


# =====================================================================
# LINK REWRITING
# =====================================================================

_EOCD = struct.Struct("<IHHHHIIH")
_CDH = struct.Struct("<IHHHHHHIIIHHHHHII")
_LFH = struct.Struct("<IHHHHHIIIHH")
_EOCD_SIG = 0x06054B50
_CDH_SIG = 0x02014B50
_LFH_SIG = 0x04034B50
_DD_SIG = b"PK\x07\x08"


@dataclass
class _ZipEntry:
    name: str
    fields: list
    tail: bytes  # name + extra + comment as stored in the central directory


def _central_directory(data: bytes) -> tuple[list[_ZipEntry], tuple, bytes]:
    pos = data.rfind(struct.pack("<I", _EOCD_SIG), max(0, len(data) - _EOCD.size - 0xFFFF))
    if pos < 0:
        raise NotAPackage("end of central directory not found")
    eocd = _EOCD.unpack_from(data, pos)
    _, _, _, _, total, _, cd_offset, comment_len = eocd
    if total == 0xFFFF or cd_offset == 0xFFFFFFFF:
        raise CorruptPart("[zip]", "ZIP64 archives are not supported for rewriting")
    comment = data[pos + _EOCD.size: pos + _EOCD.size + comment_len]
    entries = []
    p = cd_offset
    for _ in range(total):
        fields = list(_CDH.unpack_from(data, p))
        if fields[0] != _CDH_SIG:
            raise CorruptPart("[zip]", "bad central directory record")
        n_len, x_len, c_len = fields[10], fields[11], fields[12]
        start = p + _CDH.size
        raw_name = data[start:start + n_len]
        name = raw_name.decode("utf-8" if fields[3] & 0x800 else "cp437")
        entries.append(_ZipEntry(name, fields, data[start:start + n_len + x_len + c_len]))
        p = start + n_len + x_len + c_len
    return entries, eocd, comment


def _local_record(data: bytes, entry: _ZipEntry) -> tuple[bytes, tuple, bytes]:
    """(raw local record, local header fields, local name+extra)"""
    off = entry.fields[16]
    lfh = _LFH.unpack_from(data, off)
    if lfh[0] != _LFH_SIG:
        raise CorruptPart(entry.name, "bad local file header")
    head_end = off + _LFH.size + lfh[9] + lfh[10]
    end = head_end + entry.fields[8]
    if entry.fields[3] & 0x08:
        end += 16 if data[end:end + 4] == _DD_SIG else 12
    return data[off:end], lfh, data[off + _LFH.size:head_end]


def _compress(payload: bytes, method: int, part: str) -> bytes:
    if method == zipfile.ZIP_STORED:
        return payload
    if method == zipfile.ZIP_DEFLATED:
        co = zlib.compressobj(6, zlib.DEFLATED, -15)
        return co.compress(payload) + co.flush()
    raise CorruptPart(part, f"unsupported compression method {method}")


def _splice(data: bytes, replacements: Mapping[str, bytes]) -> bytes:
    """
    Rebuild the archive with `replacements` swapped in. Other entries'
    local records are copied raw; modified entries keep their original
    compression method.
    """
    entries, eocd, comment = _central_directory(data)
    out = bytearray()
    new_offsets: dict[int, int] = {}
    new_fields: dict[int, list] = {}

    for i in sorted(range(len(entries)), key=lambda k: entries[k].fields[16]):
        entry = entries[i]
        raw, lfh, name_extra = _local_record(data, entry)
        new_offsets[i] = len(out)
        fields = list(entry.fields)
        if entry.name in replacements:
            payload = replacements[entry.name]
            method = lfh[3]
            comp = _compress(payload, method, entry.name)
            crc = zlib.crc32(payload) & 0xFFFFFFFF
            flags = lfh[2] & ~0x08
            out += _LFH.pack(
                _LFH_SIG, lfh[1], flags, method, lfh[4], lfh[5],
                crc, len(comp), len(payload), lfh[9], lfh[10],
            )
            out += name_extra
            out += comp
            fields[3] = fields[3] & ~0x08
            fields[7], fields[8], fields[9] = crc, len(comp), len(payload)
        else:
            out += raw
        fields[16] = new_offsets[i]
        new_fields[i] = fields

    cd_start = len(out)
    for i, entry in enumerate(entries):
        out += _CDH.pack(*new_fields[i])
        out += entry.tail
    cd_size = len(out) - cd_start
    sig, disk, cd_disk, n_disk, total, _, _, comment_len = eocd
    out += _EOCD.pack(sig, disk, cd_disk, n_disk, total, cd_size, cd_start, comment_len)
    out += comment
    return bytes(out)


def rewrite_links(
    data: bytes,
    rewrites: Mapping[str, str],
) -> tuple[bytes, list[tuple[int, str, str]]]:
    """
    Replace external-link relationship Targets.

    Keys are matched against stored targets after URI normalization.
    When nothing matches the input bytes are returned unchanged.

    Returns:
        (package bytes, applied substitutions as (index, old, new))
    """
    zf = _open_package(data)
    summary = _summarize(zf)
    if not rewrites:
        return data, []

    lookup = {normalize_target(k): v for k, v in rewrites.items()}
    applied: list[tuple[int, str, str]] = []
    replacements: dict[str, bytes] = {}
    for index, (_, rels_part) in enumerate(summary.external_link_parts, start=1):
        root = _parse_part(zf, rels_part)
        changed = False
        for rel in root.iterfind("pr:Relationship", NS):
            old = rel.get("Target")
            if old is None:
                continue
            new = lookup.get(normalize_target(old))
            if new is None or new == old:
                continue
            rel.set("Target", new)
            applied.append((index, old, new))
            changed = True
        if changed:
            replacements[rels_part] = etree.tostring(
                root, xml_declaration=True, encoding="UTF-8", standalone=True
            )

    if not applied:
        return data, []
    for index, old, new in applied:
        logger.info(f"[MIGRATE] link {index}: {old} -> {new}")
    return _splice(data, replacements), applied
