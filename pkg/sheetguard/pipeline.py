"""
Audit Pipeline Orchestrator
---------------------------------------------------------
Runs the full spreadsheet audit as one staged job:
Scan -> Link graph -> Risk -> Reports.

Output directory layout:
    inventory.json, inventory.csv   inventory records
    graph.json, graph.dot           dependency graph
    risk/<n>.json                   model-audit report per parsed workbook
    audit_summary.json              stage timings, counts and risk index
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

from config.settings import DEFAULT_EXTENSIONS, SCAN_WORKERS
from sheetguard.discovery import InventoryRecord, ParseStatus, export_inventory, scan
from sheetguard.errors import PackageError
from sheetguard.linkgraph import annotate_dependents, build_graph, cycles, emit, read_file_uri
from sheetguard.ooxml import read_package
from sheetguard.risk import RiskConfig, assess, render_risk_report

logger = logging.getLogger(__name__)


def _stage(title: str) -> None:
    logger.info("#" * 60)
    logger.info(f"# {title}")
    logger.info("#" * 60)


def _risk_stage(
    records: Sequence[InventoryRecord],
    cfg: RiskConfig,
    broken: dict[str, list[str]],
    load: Callable[[str], bytes],
    risk_dir: Path,
) -> tuple[list[InventoryRecord], dict[str, str]]:
    risk_dir.mkdir(parents=True, exist_ok=True)
    rated: list[InventoryRecord] = []
    index: dict[str, str] = {}
    n = 0
    for record in records:
        if record.parse_status is not ParseStatus.PARSED:
            rated.append(record)
            continue
        try:
            wb = read_package(load(record.uri), record.uri)
            findings, result = assess(wb, cfg, broken.get(record.uri, ()))
        except (PackageError, OSError, ValueError) as e:
            logger.warning(f"[WARN] [RISK] {record.uri}: {e}")
            rated.append(replace(record, detail=str(e)))
            continue
        n += 1
        name = f"risk/{n}.json"
        (risk_dir / f"{n}.json").write_bytes(render_risk_report(record.uri, findings, result, "json"))
        index[record.uri] = name
        rated.append(replace(record, risk=result.rating))
        logger.info(f"[RISK] {record.uri}: {result.rating.value} ({len(findings)} findings)")
    return rated, index


def run_audit(
    roots: Sequence[str | Path],
    out_dir: str | Path,
    cfg: RiskConfig | None = None,
    extensions: Iterable[str] = DEFAULT_EXTENSIONS,
    workers: int = SCAN_WORKERS,
    loader: Callable[[str], bytes] | None = None,
) -> dict:
    """
    Execute the full audit and write its reports into `out_dir`.

    Returns the results dict that is also written to audit_summary.json;
    `status` is "success" or "failed" (with `error`).
    """
    cfg = cfg or RiskConfig()
    load = loader or read_file_uri
    out = Path(out_dir)
    pipeline_start = time.time()

    logger.info("+" + "=" * 58 + "+")
    logger.info("|  SheetGuard: End-User Computing Audit                    |")
    logger.info("|  Scan -> Link graph -> Risk -> Reports                   |")
    logger.info("+" + "=" * 58 + "+")

    results: dict = {
        "start_time": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "roots": [str(r) for r in roots],
        "status": "running",
        "stages": {},
    }

    try:
        out.mkdir(parents=True, exist_ok=True)

        # =========== STAGE 1: SCAN ===========
        _stage("STAGE 1: SCAN")
        t0 = time.time()
        records = scan(roots, extensions, workers=workers)
        results["stages"]["scan"] = {
            "status": "success",
            "duration_seconds": round(time.time() - t0, 2),
            "files": len(records),
            "parsed": sum(1 for r in records if r.parse_status is ParseStatus.PARSED),
            "failed": sum(1 for r in records if r.parse_status is ParseStatus.FAILED),
        }

        # =========== STAGE 2: LINK GRAPH ===========
        _stage("STAGE 2: LINK GRAPH")
        t0 = time.time()
        graph = build_graph(records, loader=load)
        records = annotate_dependents(records, graph)
        loops = cycles(graph)
        results["stages"]["graph"] = {
            "status": "success",
            "duration_seconds": round(time.time() - t0, 2),
            "nodes": len(graph.nodes),
            "edges": len(graph.edges),
            "broken_links": len(graph.broken),
            "cycles": loops,
        }

        # =========== STAGE 3: RISK ===========
        _stage("STAGE 3: RISK")
        t0 = time.time()
        records, risk_index = _risk_stage(records, cfg, graph.broken_targets(), load, out / "risk")
        ratings: dict[str, int] = {"High": 0, "Medium": 0, "Low": 0}
        for r in records:
            if r.risk is not None:
                ratings[r.risk.value] += 1
        results["stages"]["risk"] = {
            "status": "success",
            "duration_seconds": round(time.time() - t0, 2),
            "rated": len(risk_index),
            "ratings": ratings,
        }
        results["risk_reports"] = risk_index

        # =========== STAGE 4: REPORTS ===========
        _stage("STAGE 4: REPORTS")
        t0 = time.time()
        (out / "inventory.json").write_bytes(export_inventory(records, "json"))
        (out / "inventory.csv").write_bytes(export_inventory(records, "csv"))
        (out / "graph.json").write_text(emit(graph, "json"), encoding="utf-8")
        (out / "graph.dot").write_text(emit(graph, "dot"), encoding="utf-8")
        results["stages"]["reports"] = {
            "status": "success",
            "duration_seconds": round(time.time() - t0, 2),
            "out_dir": str(out),
        }

        # =========== SUMMARY ===========
        total_time = time.time() - pipeline_start
        results["status"] = "success"
        results["end_time"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
        results["total_duration_seconds"] = round(total_time, 2)

        logger.info("=" * 60)
        logger.info("[OK] AUDIT SUMMARY")
        logger.info("=" * 60)
        logger.info(f"Total Duration: {total_time:.2f} seconds")
        for stage, info in results["stages"].items():
            logger.info(f"  {stage.upper()}: {info['status']} ({info['duration_seconds']}s)")
        logger.info("=" * 60)

    except Exception as e:
        results["status"] = "failed"
        results["error"] = str(e)
        results["end_time"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
        results["total_duration_seconds"] = round(time.time() - pipeline_start, 2)
        logger.error(f"[ERROR] AUDIT FAILED: {e}")
        logger.exception("Full traceback:")

    try:
        (out / "audit_summary.json").write_text(
            json.dumps(results, indent=2, ensure_ascii=False) + "\n", encoding="utf-8",
        )
    except OSError as e:
        logger.error(f"[ERROR] cannot write audit summary: {e}")
    return results
