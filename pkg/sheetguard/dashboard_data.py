"""
DASHBOARD DATA Module
---------------------------------------------------------
Shapes an audit output directory (see pipeline.run_audit) into pandas
DataFrames for the Streamlit dashboard.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

logger = logging.getLogger(__name__)

RISK_LEVELS = ["High", "Medium", "Low"]
FINDING_COLUMNS = ["uri", "kind", "severity", "location", "detail"]
EDGE_COLUMNS = ["from", "to", "link_index"]
BROKEN_COLUMNS = ["from", "target", "link_index", "detail"]


@dataclass
class AuditData:
    inventory: pd.DataFrame
    findings: pd.DataFrame
    edges: pd.DataFrame
    broken: pd.DataFrame
    summary: dict = field(default_factory=dict)


def _read_json(path: Path, default):
    if not path.exists():
        logger.warning(f"[WARN] {path} missing, using empty data")
        return default
    return json.loads(path.read_text(encoding="utf-8"))


def load_audit(out_dir: str | Path) -> AuditData:
    out = Path(out_dir)
    inventory = pd.DataFrame(_read_json(out / "inventory.json", []))
    graph = _read_json(out / "graph.json", {})
    summary = _read_json(out / "audit_summary.json", {})

    rows = []
    for uri, rel in sorted((summary.get("risk_reports") or {}).items()):
        report = _read_json(out / rel, {})
        for f in report.get("findings", []):
            rows.append({"uri": uri, **{k: f.get(k) for k in FINDING_COLUMNS[1:]}})

    return AuditData(
        inventory=inventory,
        findings=pd.DataFrame(rows, columns=FINDING_COLUMNS),
        edges=pd.DataFrame(graph.get("edges", []), columns=EDGE_COLUMNS),
        broken=pd.DataFrame(graph.get("broken", []), columns=BROKEN_COLUMNS),
        summary=summary,
    )


def kpis(data: AuditData) -> dict[str, int]:
    inv = data.inventory
    if inv.empty:
        return {"files": 0, "parsed": 0, "failed": 0, "high_risk": 0,
                "with_macros": 0, "links": 0, "broken_links": len(data.broken)}
    return {
        "files": len(inv),
        "parsed": int((inv["parse_status"] == "Parsed").sum()),
        "failed": int((inv["parse_status"] == "Failed").sum()),
        "high_risk": int((inv["risk"] == "High").sum()),
        "with_macros": int((inv["has_macros"] == True).sum()),  # noqa: E712
        "links": len(data.edges),
        "broken_links": len(data.broken),
    }


def risk_distribution(inventory: pd.DataFrame) -> pd.DataFrame:
    """One row per rating, High first, zero-filled."""
    if inventory.empty or "risk" not in inventory:
        counts = pd.Series(dtype=int)
    else:
        counts = inventory["risk"].dropna().value_counts()
    return pd.DataFrame({
        "risk": RISK_LEVELS,
        "count": [int(counts.get(level, 0)) for level in RISK_LEVELS],
    })


def kind_breakdown(inventory: pd.DataFrame) -> pd.DataFrame:
    if inventory.empty or "kind" not in inventory:
        return pd.DataFrame(columns=["kind", "count"])
    counts = inventory.groupby("kind").size().reset_index(name="count")
    return counts.sort_values(["count", "kind"], ascending=[False, True]).reset_index(drop=True)


def findings_by_kind(findings: pd.DataFrame) -> pd.DataFrame:
    if findings.empty:
        return pd.DataFrame(columns=["kind", "severity", "count"])
    return (
        findings.groupby(["kind", "severity"]).size().reset_index(name="count")
        .sort_values(["count", "kind"], ascending=[False, True]).reset_index(drop=True)
    )


def most_depended_on(inventory: pd.DataFrame, top: int = 10) -> pd.DataFrame:
    """Critical spreadsheets: highest inbound link counts first."""
    if inventory.empty or "dependents" not in inventory:
        return pd.DataFrame(columns=["uri", "dependents", "risk"])
    ranked = inventory[inventory["dependents"].fillna(0) > 0][["uri", "dependents", "risk"]]
    return ranked.sort_values(["dependents", "uri"], ascending=[False, True]).head(top).reset_index(drop=True)
