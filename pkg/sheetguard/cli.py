"""
SheetGuard command line
---------------------------------------------------------
One executable, subcommand style:

  scan      inventory spreadsheets under directory roots
  analyze   model-audit risk report for a workbook or an inventory
  graph     link dependency graph (dot | json)
  migrate   plan | execute a link-rewriting migration into the repository
  diff      cell-level change report between two files or path@version refs
  repo      checkin | get | lock | unlock | history | retain | verify | mkcol | audit
  workflow  create | submit | review | approve | reject | rework | withdraw | verify | status | list
  serve     WebDAV server over the repository
  audit     full scan -> graph -> risk -> reports pipeline

Exit codes: 0 success, 1 operational error, 2 usage error.
Machine output goes to stdout; logging goes to stderr.
"""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from config.settings import DEFAULT_EXTENSIONS, CliConfig, load_config
from sheetguard.errors import ConfigError, QueryError, SheetGuardError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)-20s | %(message)s"


def setup_logging(level: str = "INFO", log_file: str | Path | None = None) -> logging.Logger:
    """Configure logging to UTF-8 stderr (stdout is for machine output) plus an optional file."""
    try:
        sys.stderr.reconfigure(encoding="utf-8", errors="replace")
    except (AttributeError, ValueError, OSError):
        pass
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=handlers,
        force=True,
    )
    return logging.getLogger("sheetguard")


def _emit(data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode("utf-8")
    sys.stdout.flush()
    buffer = getattr(sys.stdout, "buffer", None)
    if buffer is not None:
        buffer.write(data)
        buffer.flush()
    else:
        sys.stdout.write(data.decode("utf-8"))


def _emit_json(doc) -> None:
    _emit(json.dumps(doc, indent=2, ensure_ascii=False) + "\n")


def _user(args) -> str:
    return getattr(args, "actor", None) or getpass.getuser()


# =====================================================================
# SHARED HELPERS
# =====================================================================

def _store(cfg: CliConfig):
    from sheetguard.repository import RepositoryStore

    return RepositoryStore(cfg.store_root)


def _risk_config(args, cfg: CliConfig):
    from sheetguard.risk import RiskConfig, load_risk_config

    path = getattr(args, "risk_config", None) or cfg.risk_config
    return load_risk_config(path) if path else RiskConfig()


def _inventory_format(path: str) -> str:
    return "csv" if path.lower().endswith(".csv") else "json"


def _records(args):
    """Inventory records from --inventory, else from scanning the roots."""
    from sheetguard.discovery import load_inventory, scan

    if getattr(args, "inventory", None):
        data = Path(args.inventory).read_bytes()
        return load_inventory(data, _inventory_format(args.inventory))
    if not args.roots:
        raise ConfigError("give directory roots or --inventory")
    return scan(args.roots, args.ext or DEFAULT_EXTENSIONS, include_hidden=args.include_hidden)


def _as_uri(text: str) -> str:
    from sheetguard.uris import canonical_uri, path_to_uri

    if "://" in text or text.startswith("file:"):
        return canonical_uri(text)
    return path_to_uri(Path(text).resolve())


# =====================================================================
# COMMANDS
# =====================================================================

def cmd_scan(args, cfg: CliConfig) -> int:
    from sheetguard.discovery import annotate_risk, export_inventory, matches, parse_query, scan
    from sheetguard.linkgraph import annotate_dependents, build_graph

    query = parse_query(args.query) if args.query else None
    records = scan(
        args.roots,
        args.ext or DEFAULT_EXTENSIONS,
        include_hidden=args.include_hidden,
        workers=args.workers,
    )
    # dependents and risk are filled before filtering so queries can use them
    graph = build_graph(records)
    records = annotate_dependents(records, graph)
    if args.risk:
        records = annotate_risk(records, _risk_config(args, cfg), broken=graph.broken_targets())
    if query is not None:
        records = [r for r in records if matches(r, query)]
    _emit(export_inventory(records, args.format))
    return 0


def cmd_analyze(args, cfg: CliConfig) -> int:
    from sheetguard.discovery import annotate_risk, export_inventory, load_inventory
    from sheetguard.ooxml import read_package
    from sheetguard.risk import assess, render_risk_report
    from sheetguard.uris import path_to_uri

    rcfg = _risk_config(args, cfg)
    target = Path(args.target)
    if args.inventory:
        fmt = _inventory_format(args.target)
        records = annotate_risk(load_inventory(target.read_bytes(), fmt), rcfg)
        _emit(export_inventory(records, fmt))
        return 0
    uri = path_to_uri(target.resolve())
    wb = read_package(target.read_bytes(), uri)
    findings, result = assess(wb, rcfg)
    _emit(render_risk_report(uri, findings, result, args.format))
    return 0


def cmd_graph(args, cfg: CliConfig) -> int:
    from sheetguard.linkgraph import build_graph, cycles, emit

    graph = build_graph(_records(args))
    for loop in cycles(graph):
        logger.warning(f"[WARN] [GRAPH] link cycle: {' -> '.join(loop)}")
    _emit(emit(graph, args.format))
    return 0


def cmd_migrate_plan(args, cfg: CliConfig) -> int:
    from sheetguard.discovery import matches, parse_query
    from sheetguard.linkgraph import build_graph
    from sheetguard.migration import Layout, plan_migration

    records = _records(args)
    graph = build_graph(records)
    selected = [_as_uri(s) for s in args.select or ()]
    if args.query:
        q = parse_query(args.query)
        selected += [r.uri for r in records if r.kind.is_spreadsheet and matches(r, q)]
    layout = Layout.preserve_tree(args.tree_root) if args.tree_root else Layout.flatten()
    plan = plan_migration(graph, selected, args.base_url, layout)
    text = plan.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        logger.info(f"[OK] plan with {len(plan.entries)} entries written to {args.out}")
    else:
        _emit(text)
    return 0


def cmd_migrate_execute(args, cfg: CliConfig) -> int:
    from sheetguard.migration import MigrationPlan, MigrationStatus, execute, log_to_csv, log_to_jsonl
    from sheetguard.repository import LocalRepositoryClient

    plan = MigrationPlan.from_json(Path(args.plan).read_text(encoding="utf-8"))
    if args.remote:
        from sheetguard.davclient import DavRepositoryClient

        auth = (args.remote_user, args.remote_password) if args.remote_user else None
        client = DavRepositoryClient(args.remote, auth=auth)
    else:
        client = LocalRepositoryClient(_store(cfg))
    log = execute(plan, client, author=_user(args))
    _emit(log_to_csv(log) if args.log_format == "csv" else log_to_jsonl(log))
    return 1 if any(e.status is MigrationStatus.FAILED for e in log) else 0


def _load_version(ref: str, cfg: CliConfig):
    """A file path, or `repo/path@version` read from the store."""
    from sheetguard.ooxml import read_package
    from sheetguard.uris import path_to_uri

    path = Path(ref)
    if path.exists():
        return read_package(path.read_bytes(), path_to_uri(path.resolve())), ref
    repo_path, sep, version = ref.rpartition("@")
    if not sep or not version.isdigit():
        raise ConfigError(f"{ref} is neither a file nor path@version")
    data = _store(cfg).get(repo_path, int(version))
    return read_package(data, ref), ref


def cmd_diff(args, cfg: CliConfig) -> int:
    from sheetguard.changes import diff_workbooks, notify, render_change_report

    old, old_label = _load_version(args.old, cfg)
    new, new_label = _load_version(args.new, cfg)
    cs = diff_workbooks(old, new, old_label, new_label)
    _emit(render_change_report(cs, args.format))
    if args.notify:
        written = notify(cs, cfg.subscriptions, cfg.outbox)
        logger.info(f"[NOTIFY] {len(written)} messages written to {cfg.outbox}")
    return 0


def cmd_repo(args, cfg: CliConfig) -> int:
    from sheetguard.repository import RetentionPolicy

    store = _store(cfg)
    action = args.repo_command
    if action == "checkin":
        data = Path(args.file).read_bytes()
        record = store.checkin(args.path, data, _user(args), args.comment, token=args.token)
        _emit(record.to_json() + "\n")
    elif action == "get":
        data = store.get(args.path, args.version, actor=_user(args))
        if args.output:
            Path(args.output).write_bytes(data)
        else:
            _emit(data)
    elif action == "lock":
        lock = store.lock(args.path, _user(args), args.ttl)
        _emit_json(lock.to_dict())
    elif action == "unlock":
        store.unlock(args.path, args.token, actor=_user(args))
    elif action == "history":
        _emit("".join(r.to_json() + "\n" for r in store.history(args.path)))
    elif action == "retain":
        newer = datetime.fromisoformat(args.newer_than) if args.newer_than else None
        if newer is not None and newer.tzinfo is None:
            newer = newer.replace(tzinfo=timezone.utc)
        policy = RetentionPolicy(keep_last=args.keep_last, newer_than=newer)
        purged = store.apply_retention(policy, actor=_user(args))
        _emit_json([{"path": p, "version": v} for p, v in purged])
    elif action == "verify":
        issues = store.verify_integrity()
        _emit_json([{"path": i.path, "version": i.version, "problem": i.problem} for i in issues])
        return 1 if issues else 0
    elif action == "mkcol":
        store.make_collection(args.path, actor=_user(args))
    elif action == "audit":
        _emit("".join(json.dumps(e.to_dict(), ensure_ascii=False) + "\n" for e in store.audit_log()))
    return 0


def cmd_workflow(args, cfg: CliConfig) -> int:
    from sheetguard.workflow import Action, EventLog, Workflow

    wf = Workflow(_store(cfg), EventLog(cfg.workflow_log))
    action = args.workflow_command
    actor = _user(args)
    if action == "create":
        cr, _ = wf.create_request(
            args.path, actor, args.base, args.proposed,
            title=args.title, description=args.description, reviewers=args.reviewer or (),
        )
        _emit_json(cr.to_dict())
    elif action == "verify":
        ok, bad = wf.verify()
        _emit_json({"ok": ok, "first_bad_seq": bad})
        return 0 if ok else 1
    elif action == "status":
        _emit_json({
            "request": wf.get(args.id).to_dict(),
            "events": [json.loads(e.to_json()) for e in wf.history(args.id)],
        })
    elif action == "list":
        _emit_json([cr.to_dict() for _, cr in sorted(wf.requests().items())])
    else:
        act = {
            "submit": Action.SUBMIT,
            "review": Action.START_REVIEW,
            "approve": Action.APPROVE,
            "reject": Action.REJECT,
            "rework": Action.REWORK,
            "withdraw": Action.WITHDRAW,
        }[action]
        signature = wf.sign(args.id, act, actor) if act in (Action.APPROVE, Action.REJECT) else None
        cr, _ = wf.transition(args.id, act, actor, signature=signature, comment=args.comment)
        _emit_json(cr.to_dict())
    return 0


def cmd_serve(args, cfg: CliConfig) -> int:
    from sheetguard.davserver import serve

    host, port = cfg.bind
    serve(_store(cfg), host, port, cfg.users)
    return 0


def cmd_audit(args, cfg: CliConfig) -> int:
    from sheetguard.pipeline import run_audit

    results = run_audit(args.roots, args.out, _risk_config(args, cfg), args.ext or DEFAULT_EXTENSIONS)
    _emit_json({k: results.get(k) for k in ("status", "total_duration_seconds", "stages", "error") if k in results})
    return 0 if results["status"] == "success" else 1


# =====================================================================
# PARSER
# =====================================================================

def _add_scan_options(p: argparse.ArgumentParser, roots_required: bool = True) -> None:
    p.add_argument("roots", nargs="+" if roots_required else "*", help="directories to scan")
    p.add_argument("--ext", action="append", help="extension to include (repeatable)")
    p.add_argument("--include-hidden", action="store_true", help="descend into dot-directories")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sheetguard", description="Spreadsheet governance toolkit")
    parser.add_argument("--config", help="JSON config file (default: $SHEETGUARD_CONFIG)")
    parser.add_argument("--store", dest="store_root", help="repository store directory")
    parser.add_argument("--outbox", help="alert outbox directory")
    parser.add_argument("--workflow-log", help="workflow event log file")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING, ERROR")
    parser.add_argument("--log-file", help="also log to this file")
    parser.add_argument("--as", dest="actor", help="acting user (default: login name)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("scan", help="inventory spreadsheets")
    _add_scan_options(p)
    p.add_argument("--query", help='filter, e.g. "risk >= Medium AND has_macros == true"')
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--risk", action="store_true", help="risk-rate every parsed workbook")
    p.add_argument("--risk-config", help="RiskConfig JSON")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("analyze", help="risk report for one workbook or an inventory")
    p.add_argument("target", help="workbook file, or inventory file with --inventory")
    p.add_argument("--inventory", action="store_true", help="target is an exported inventory")
    p.add_argument("--config", dest="risk_config", help="RiskConfig JSON")
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("graph", help="link dependency graph")
    _add_scan_options(p, roots_required=False)
    p.add_argument("--inventory", help="exported inventory (json or csv) instead of scanning")
    p.add_argument("--format", choices=("dot", "json"), default="dot")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("migrate", help="link-rewriting migration")
    msub = p.add_subparsers(dest="migrate_command", required=True, metavar="ACTION")
    mp = msub.add_parser("plan", help="plan destinations")
    _add_scan_options(mp, roots_required=False)
    mp.add_argument("--inventory", help="exported inventory instead of scanning")
    mp.add_argument("--select", action="append", help="workbook path or URI (repeatable)")
    mp.add_argument("--query", help="select every spreadsheet matching this inventory query")
    mp.add_argument("--base-url", required=True, help="repository base URL")
    mp.add_argument("--tree-root", help="keep the folder tree below this directory")
    mp.add_argument("--out", help="write the plan here instead of stdout")
    mp.set_defaults(func=cmd_migrate_plan)
    me = msub.add_parser("execute", help="execute a plan")
    me.add_argument("plan", help="plan JSON from `migrate plan`")
    me.add_argument("--remote", help="WebDAV base URL (default: local store)")
    me.add_argument("--remote-user")
    me.add_argument("--remote-password")
    me.add_argument("--log-format", choices=("jsonl", "csv"), default="jsonl")
    me.set_defaults(func=cmd_migrate_execute)

    p = sub.add_parser("diff", help="cell-level change report")
    p.add_argument("old", help="file or repo/path@version")
    p.add_argument("new", help="file or repo/path@version")
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.add_argument("--notify", action="store_true", help="write alerts for subscribers to the outbox")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("repo", help="versioned repository")
    rsub = p.add_subparsers(dest="repo_command", required=True, metavar="ACTION")
    r = rsub.add_parser("checkin")
    r.add_argument("path")
    r.add_argument("file")
    r.add_argument("--comment", default="")
    r.add_argument("--token", help="lock token held for the path")
    r = rsub.add_parser("get")
    r.add_argument("path")
    r.add_argument("--version", type=int)
    r.add_argument("-o", "--output")
    r = rsub.add_parser("lock")
    r.add_argument("path")
    r.add_argument("--ttl", type=int, default=300)
    r = rsub.add_parser("unlock")
    r.add_argument("path")
    r.add_argument("token")
    r = rsub.add_parser("history")
    r.add_argument("path")
    r = rsub.add_parser("retain")
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--keep-last", type=int)
    g.add_argument("--newer-than", help="ISO timestamp")
    rsub.add_parser("verify")
    r = rsub.add_parser("mkcol")
    r.add_argument("path")
    rsub.add_parser("audit")
    p.set_defaults(func=cmd_repo)

    p = sub.add_parser("workflow", help="change-request workflow")
    wsub = p.add_subparsers(dest="workflow_command", required=True, metavar="ACTION")
    w = wsub.add_parser("create")
    w.add_argument("path")
    w.add_argument("--base", type=int, required=True)
    w.add_argument("--proposed", type=int, required=True)
    w.add_argument("--title", default="")
    w.add_argument("--description", default="")
    w.add_argument("--reviewer", action="append")
    for name in ("submit", "review", "approve", "reject", "rework", "withdraw"):
        w = wsub.add_parser(name)
        w.add_argument("id")
        w.add_argument("--comment", default="")
    w = wsub.add_parser("status")
    w.add_argument("id")
    wsub.add_parser("verify")
    wsub.add_parser("list")
    p.set_defaults(func=cmd_workflow)

    p = sub.add_parser("serve", help="WebDAV server")
    p.add_argument("--bind", help="host:port")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("audit", help="full audit pipeline")
    _add_scan_options(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--risk-config", help="RiskConfig JSON")
    p.set_defaults(func=cmd_audit)
    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    overrides = {
        "store_root": args.store_root,
        "outbox": args.outbox,
        "workflow_log": args.workflow_log,
        "log_level": args.log_level,
        "log_file": args.log_file,
        "bind": getattr(args, "bind", None),
    }
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        print(f"sheetguard: config error: {e}", file=sys.stderr)
        return 2
    setup_logging(cfg.log_level, cfg.log_file)

    try:
        return args.func(args, cfg)
    except (ConfigError, QueryError) as e:
        print(f"sheetguard: {e}", file=sys.stderr)
        return 2
    except (SheetGuardError, OSError) as e:
        print(f"sheetguard: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
