"""
RISK Module
---------------------------------------------------------
Cell and formula diagnostics plus the complexity/materiality rating.

Detectors:
  - ErrorCell            cached #DIV/0!, #REF!, ... values
  - VeryHiddenSheet      sheets hidden from the unhide dialog
  - InvisibleCell        font color == fill color, or number format ";;;"
  - InconsistentFormula  minority R1C1 forms inside a row/column run
  - BrokenLink           link targets the dependency graph could not resolve
  - Unanalyzable         formulas the scanner cannot rewrite

"Inconsistent" means: inside a maximal horizontal or vertical run of at
least three formula cells, a cell whose R1C1 normal form differs from a
form held by a strict majority of the run.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from sheetguard.errors import InvalidConfig, MalformedFormula
from sheetguard.formula import analyze_formula, compute_stats
from sheetguard.grid import (
    CellAddress,
    CellKind,
    Visibility,
    Workbook,
    Worksheet,
    quote_sheet,
)
from sheetguard.uris import canonical_uri

logger = logging.getLogger(__name__)

MIN_RUN = 3
HIDDEN_NUMBER_FORMAT = ";;;"


class RiskLevel(str, Enum):
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"

    @property
    def rank(self) -> int:
        return {"Low": 1, "Medium": 2, "High": 3}[self.value]

    @classmethod
    def parse(cls, text: str) -> "RiskLevel":
        for level in cls:
            if level.value.lower() == str(text).strip().lower():
                return level
        raise InvalidConfig(f"unknown risk level: {text!r}")


class FindingKind(str, Enum):
    ERROR_CELL = "ErrorCell"
    VERY_HIDDEN_SHEET = "VeryHiddenSheet"
    INVISIBLE_CELL = "InvisibleCell"
    INCONSISTENT_FORMULA = "InconsistentFormula"
    BROKEN_LINK = "BrokenLink"
    UNANALYZABLE = "Unanalyzable"


class Severity(str, Enum):
    INFO = "Info"
    WARN = "Warn"
    HIGH = "High"


@dataclass(frozen=True)
class Finding:
    kind: FindingKind
    location: str
    detail: str
    severity: Severity

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "location": self.location,
            "detail": self.detail,
            "severity": self.severity.value,
        }


# =====================================================================
# CONFIG
# =====================================================================

@dataclass(frozen=True)
class RiskWeights:
    per_formula: float = 1.0
    per_link: float = 5.0
    per_unique_function: float = 2.0
    per_sheet: float = 1.0
    macro_bonus: float = 25.0
    per_high_finding: float = 10.0


@dataclass(frozen=True)
class RiskConfig:
    weights: RiskWeights = field(default_factory=RiskWeights)
    medium_at: float = 50.0
    high_at: float = 200.0
    materiality: Mapping[str, RiskLevel] = field(default_factory=dict)
    materiality_medium_at: float = 1e3
    materiality_high_at: float = 1e6

    def validate(self) -> "RiskConfig":
        for f in fields(RiskWeights):
            if getattr(self.weights, f.name) < 0:
                raise InvalidConfig(f"weight {f.name} must be non-negative")
        if not self.medium_at < self.high_at:
            raise InvalidConfig(
                f"complexity thresholds need medium_at < high_at "
                f"(got {self.medium_at}, {self.high_at})"
            )
        if not self.materiality_medium_at < self.materiality_high_at:
            raise InvalidConfig("materiality thresholds need medium < high")
        return self

    @classmethod
    def from_mapping(cls, data: Mapping) -> "RiskConfig":
        """
        Build a config from parsed JSON.

        Accepted keys: weights (object or 6-element list), complexity_thresholds
        (object or [medium_at, high_at]), materiality ({uri: level}),
        materiality_thresholds ({medium_at, high_at}).
        """
        if not isinstance(data, Mapping):
            raise InvalidConfig("risk config must be a JSON object")
        try:
            raw_weights = data.get("weights", {})
            names = [f.name for f in fields(RiskWeights)]
            if isinstance(raw_weights, (list, tuple)):
                if len(raw_weights) != len(names):
                    raise InvalidConfig(f"weights list needs {len(names)} values")
                raw_weights = dict(zip(names, raw_weights))
            unknown = set(raw_weights) - set(names)
            if unknown:
                raise InvalidConfig(f"unknown weights: {sorted(unknown)}")
            weights = RiskWeights(**{k: float(v) for k, v in raw_weights.items()})

            thresholds = data.get("complexity_thresholds", {})
            if isinstance(thresholds, (list, tuple)):
                thresholds = {"medium_at": thresholds[0], "high_at": thresholds[1]}
            mat_thresholds = data.get("materiality_thresholds", {})
            materiality = {
                canonical_uri(uri): RiskLevel.parse(level)
                for uri, level in data.get("materiality", {}).items()
            }
            cfg = cls(
                weights=weights,
                medium_at=float(thresholds.get("medium_at", cls.medium_at)),
                high_at=float(thresholds.get("high_at", cls.high_at)),
                materiality=materiality,
                materiality_medium_at=float(
                    mat_thresholds.get("medium_at", cls.materiality_medium_at)
                ),
                materiality_high_at=float(
                    mat_thresholds.get("high_at", cls.materiality_high_at)
                ),
            )
        except (TypeError, ValueError, IndexError, AttributeError) as e:
            raise InvalidConfig(f"malformed risk config: {e}") from e
        return cfg.validate()

    def to_mapping(self) -> dict:
        return {
            "weights": asdict(self.weights),
            "complexity_thresholds": {"medium_at": self.medium_at, "high_at": self.high_at},
            "materiality": {uri: level.value for uri, level in sorted(self.materiality.items())},
            "materiality_thresholds": {
                "medium_at": self.materiality_medium_at,
                "high_at": self.materiality_high_at,
            },
        }

    def materiality_for(self, wb: Workbook) -> RiskLevel:
        """Tagged level for the workbook, else the largest-magnitude rule."""
        if wb.source_uri:
            tagged = self.materiality.get(canonical_uri(wb.source_uri))
            if tagged is not None:
                return tagged
        largest = 0.0
        for ws in wb.sheets:
            for cell in ws.cells.values():
                if cell.value.kind is CellKind.NUMBER:
                    largest = max(largest, abs(cell.value.number))
        if largest >= self.materiality_high_at:
            return RiskLevel.HIGH
        if largest >= self.materiality_medium_at:
            return RiskLevel.MEDIUM
        return RiskLevel.LOW


def load_risk_config(path: str | Path) -> RiskConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise InvalidConfig(f"cannot read risk config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"risk config {path} is not valid JSON: {e}") from e
    return RiskConfig.from_mapping(data)


@dataclass(frozen=True)
class RiskScore:
    complexity: float
    complexity_bucket: RiskLevel
    materiality: RiskLevel
    rating: RiskLevel

    def to_dict(self) -> dict:
        return {
            "complexity": self.complexity,
            "complexity_bucket": self.complexity_bucket.value,
            "materiality": self.materiality.value,
            "rating": self.rating.value,
        }


# =====================================================================
# DETECTORS
# =====================================================================

def _loc(sheet: str, row: int, col: int) -> str:
    return str(CellAddress(row, col, sheet))


def _runs(keys: Iterable[tuple[int, int]]) -> list[list[tuple[int, int]]]:
    """Maximal vertical and horizontal runs of >= MIN_RUN contiguous keys."""
    by_col: dict[int, list[int]] = {}
    by_row: dict[int, list[int]] = {}
    for r, c in keys:
        by_col.setdefault(c, []).append(r)
        by_row.setdefault(r, []).append(c)

    def _split(values: list[int]) -> list[list[int]]:
        groups: list[list[int]] = []
        for v in sorted(values):
            if groups and v == groups[-1][-1] + 1:
                groups[-1].append(v)
            else:
                groups.append([v])
        return [g for g in groups if len(g) >= MIN_RUN]

    runs = []
    for c in sorted(by_col):
        runs.extend([[(r, c) for r in g] for g in _split(by_col[c])])
    for r in sorted(by_row):
        runs.extend([[(r, c) for c in g] for g in _split(by_row[r])])
    return runs


def detect_inconsistent(ws: Worksheet) -> list[Finding]:
    """
    Flag minority formulas in every run of three or more formula cells.

    Cells whose formula cannot be normalized break runs.
    """
    return [f for _, f in _inconsistent_keyed(ws)]


def _inconsistent_keyed(ws: Worksheet) -> list[tuple[tuple[int, int], Finding]]:
    forms: dict[tuple[int, int], str] = {}
    for cell in ws.formula_cells():
        try:
            normal = analyze_formula(cell.formula, cell.addr)
        except MalformedFormula:
            continue
        if normal.analyzable:
            forms[cell.addr.key] = normal.text

    flagged: dict[tuple[int, int], Finding] = {}
    warnings: dict[tuple[int, int], Finding] = {}
    for run in _runs(forms):
        counts = Counter(forms[k] for k in run)
        if len(counts) < 2:
            continue
        majority, n = counts.most_common(1)[0]
        if n * 2 > len(run):
            for key in run:
                if forms[key] != majority and key not in flagged:
                    flagged[key] = Finding(
                        FindingKind.INCONSISTENT_FORMULA,
                        _loc(ws.name, *key),
                        f"form {forms[key]} differs from majority form {majority} "
                        f"({n} of {len(run)} cells)",
                        Severity.HIGH,
                    )
        else:
            first, last = run[0], run[-1]
            start = CellAddress(first[0], first[1]).local()
            end = CellAddress(last[0], last[1]).local()
            warnings.setdefault(first + last, Finding(
                FindingKind.INCONSISTENT_FORMULA,
                f"{quote_sheet(ws.name)}!{start}:{end}",
                f"no majority form among {len(counts)} distinct forms in {len(run)} cells",
                Severity.WARN,
            ))
    ordered = list(flagged.items()) + [(k[:2], f) for k, f in warnings.items()]
    return sorted(ordered, key=lambda kf: (kf[0], kf[1].severity is not Severity.HIGH, kf[1].location))


def _sheet_findings(ws: Worksheet) -> list[Finding]:
    keyed: list[tuple[tuple[int, int], int, Finding]] = []
    for cell in ws.sorted_cells():
        key = cell.addr.key
        loc = _loc(ws.name, *key)
        if cell.value.kind is CellKind.ERROR:
            keyed.append((key, 0, Finding(
                FindingKind.ERROR_CELL, loc, f"cached error value {cell.value.text}", Severity.HIGH,
            )))
        if not cell.value.is_empty and (
            (cell.font_color and cell.fill_color and cell.font_color == cell.fill_color)
            or cell.number_format == HIDDEN_NUMBER_FORMAT
        ):
            reason = (
                f"number format {HIDDEN_NUMBER_FORMAT}"
                if cell.number_format == HIDDEN_NUMBER_FORMAT
                else f"font color equals fill color {cell.fill_color}"
            )
            keyed.append((key, 1, Finding(FindingKind.INVISIBLE_CELL, loc, reason, Severity.WARN)))
        if cell.formula is not None:
            try:
                normal = analyze_formula(cell.formula, cell.addr)
                if not normal.analyzable:
                    keyed.append((key, 3, Finding(
                        FindingKind.UNANALYZABLE, loc,
                        "3-D or structured reference left unnormalized", Severity.INFO,
                    )))
            except MalformedFormula as e:
                keyed.append((key, 3, Finding(FindingKind.UNANALYZABLE, loc, str(e), Severity.INFO)))
    for key, f in _inconsistent_keyed(ws):
        keyed.append((key, 2, f))
    keyed.sort(key=lambda t: (t[0], t[1], t[2].location))
    return [f for _, _, f in keyed]


def diagnose(wb: Workbook, broken_links: Sequence[str] = ()) -> list[Finding]:
    """
    Run every detector over the workbook.

    Args:
        wb: parsed workbook
        broken_links: raw link targets the dependency graph could not resolve

    Returns:
        Findings ordered by sheet (workbook order), row, column; broken
        links last in link-index order.
    """
    findings: list[Finding] = []
    for ws in wb.sheets:
        if ws.visibility is Visibility.VERY_HIDDEN:
            findings.append(Finding(
                FindingKind.VERY_HIDDEN_SHEET, ws.name,
                "sheet state is veryHidden", Severity.HIGH,
            ))
        findings.extend(_sheet_findings(ws))
    broken = set(broken_links)
    for link in wb.external_links:
        if link.target in broken:
            findings.append(Finding(
                FindingKind.BROKEN_LINK, link.target,
                f"external link {link.index} resolves to no file", Severity.WARN,
            ))
    return findings


# =====================================================================
# SCORING
# =====================================================================

def rate(complexity_bucket: RiskLevel, materiality: RiskLevel) -> RiskLevel:
    """High if complexity High, or materiality High with complexity >= Medium;
    Medium if either axis is Medium or above; Low otherwise."""
    if complexity_bucket is RiskLevel.HIGH or (
        materiality is RiskLevel.HIGH and complexity_bucket.rank >= RiskLevel.MEDIUM.rank
    ):
        return RiskLevel.HIGH
    if complexity_bucket.rank >= RiskLevel.MEDIUM.rank or materiality.rank >= RiskLevel.MEDIUM.rank:
        return RiskLevel.MEDIUM
    return RiskLevel.LOW


def score(wb: Workbook, findings: Iterable[Finding], cfg: RiskConfig) -> RiskScore:
    cfg.validate()
    stats = compute_stats(wb)
    w = cfg.weights
    high_findings = sum(1 for f in findings if f.severity is Severity.HIGH)
    complexity = (
        w.per_formula * stats.formula_count
        + w.per_link * stats.external_link_count
        + w.per_unique_function * stats.unique_function_count
        + w.per_sheet * max(stats.sheet_count - 1, 0)
        + (w.macro_bonus if stats.has_macros else 0.0)
        + w.per_high_finding * high_findings
    )
    if complexity >= cfg.high_at:
        bucket = RiskLevel.HIGH
    elif complexity >= cfg.medium_at:
        bucket = RiskLevel.MEDIUM
    else:
        bucket = RiskLevel.LOW
    materiality = cfg.materiality_for(wb)
    return RiskScore(complexity, bucket, materiality, rate(bucket, materiality))


def assess(wb: Workbook, cfg: RiskConfig, broken_links: Sequence[str] = ()) -> tuple[list[Finding], RiskScore]:
    findings = diagnose(wb, broken_links)
    result = score(wb, findings, cfg)
    logger.debug(
        f"[RISK] {wb.source_uri}: {len(findings)} findings, "
        f"complexity {result.complexity:g}, rating {result.rating.value}"
    )
    return findings, result


def render_risk_report(uri: str, findings: Sequence[Finding], risk: RiskScore, fmt: str = "json") -> bytes:
    """Model-audit report for one workbook as JSON or plain text."""
    if fmt == "json":
        doc = {
            "uri": uri,
            "score": risk.to_dict(),
            "findings": [f.to_dict() for f in findings],
        }
        return (json.dumps(doc, indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    if fmt != "text":
        raise ValueError(f"unsupported risk report format: {fmt}")
    lines = [
        f"Risk report: {uri}",
        f"  Rating:      {risk.rating.value}",
        f"  Complexity:  {risk.complexity:g} ({risk.complexity_bucket.value})",
        f"  Materiality: {risk.materiality.value}",
        f"  Findings:    {len(findings)}",
    ]
    for f in findings:
        lines.append(f"  [{f.severity.value:<4}] {f.kind.value:<19} {f.location}  {f.detail}")
    return ("\n".join(lines) + "\n").encode("utf-8")
