"""
Centralized configuration for SheetGuard.
Loads settings from environment variables and .env file, and merges the
optional JSON config file named by SHEETGUARD_CONFIG.

Precedence: command-line flag > config file > environment > default.
"""

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from dotenv import load_dotenv

from sheetguard.errors import ConfigError, InvalidConfig

# Load environment variables from .env file
load_dotenv()

# ─── Paths ────────────────────────────────────────────────────────────
CONFIG_PATH = os.getenv("SHEETGUARD_CONFIG", "")
STORE_ROOT = os.getenv("SHEETGUARD_STORE_ROOT", "./sheetguard-store")
RISK_CONFIG_PATH = os.getenv("SHEETGUARD_RISK_CONFIG", "")
OUTBOX_DIR = os.getenv("SHEETGUARD_OUTBOX", "./outbox")
WORKFLOW_LOG = os.getenv("SHEETGUARD_WORKFLOW_LOG", "")

# ─── WebDAV server ────────────────────────────────────────────────────
DAV_BIND = os.getenv("SHEETGUARD_DAV_BIND", "127.0.0.1:8080")
DAV_REALM = "sheetguard"
DAV_PROPS_NAMESPACE = "urn:sheetguard:props"
DEFAULT_LOCK_TTL_SECONDS = 300
MAX_LOCK_TTL_SECONDS = 3600

# ─── Discovery ────────────────────────────────────────────────────────
SCAN_WORKERS = int(os.getenv("SHEETGUARD_SCAN_WORKERS", 4))
DEFAULT_EXTENSIONS = ("xlsx", "xlsm", "xltx", "xltm", "mdb", "accdb")

# ─── Logging ──────────────────────────────────────────────────────────
LOG_LEVEL = os.getenv("SHEETGUARD_LOG_LEVEL", "INFO")

_BIND_RE = re.compile(r"^(?P<host>\[[^\]]+\]|[^:]+):(?P<port>[0-9]+)$")
_VALID_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
_CONFIG_KEYS = {
    "store_root", "risk_config", "outbox", "workflow_log", "bind",
    "users", "log_level", "log_file", "subscriptions",
}


@dataclass(frozen=True)
class CliConfig:
    store_root: Path
    outbox: Path
    workflow_log: Path
    bind: tuple[str, int]
    risk_config: Path | None = None
    users: Mapping[str, str] = field(default_factory=dict)
    log_level: str = "INFO"
    log_file: Path | None = None
    subscriptions: tuple[tuple[str, tuple[str, ...]], ...] = ()

    @property
    def bind_text(self) -> str:
        return f"{self.bind[0]}:{self.bind[1]}"


def parse_bind(text: str) -> tuple[str, int]:
    """'host:port' -> (host, port); port must be 1..65535."""
    m = _BIND_RE.match(str(text).strip())
    if not m:
        raise ConfigError(f"bind must be host:port, got {text!r}")
    port = int(m.group("port"))
    if not 1 <= port <= 65535:
        raise ConfigError(f"bind port out of range: {port}")
    return m.group("host").strip("[]"), port


def _read_config_file(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def _ensure_dir(path: Path, what: str) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"{what} {path} cannot be created: {e}") from e
    return path


def _subscriptions(raw) -> tuple[tuple[str, tuple[str, ...]], ...]:
    if not isinstance(raw, list):
        raise ConfigError("subscriptions must be a list of {user, topics}")
    out = []
    for item in raw:
        if not isinstance(item, dict) or "user" not in item:
            raise ConfigError(f"bad subscription entry: {item!r}")
        topics = item.get("topics", ["all"])
        if isinstance(topics, str):
            topics = [topics]
        out.append((str(item["user"]), tuple(str(t) for t in topics)))
    return tuple(out)


def load_config(config_path: str | None = None, overrides: Mapping | None = None) -> CliConfig:
    """
    Build and validate the CLI configuration.

    Args:
        config_path: JSON config file; defaults to SHEETGUARD_CONFIG
        overrides: values from command-line flags (None entries ignored)

    Raises:
        ConfigError: unreadable file, bad bind address, invalid risk config,
            or directories that cannot be created
    """
    merged: dict = {
        "store_root": STORE_ROOT,
        "risk_config": RISK_CONFIG_PATH or None,
        "outbox": OUTBOX_DIR,
        "workflow_log": WORKFLOW_LOG or None,
        "bind": DAV_BIND,
        "users": {},
        "log_level": LOG_LEVEL,
        "log_file": None,
        "subscriptions": [],
    }
    path = config_path or CONFIG_PATH
    if path:
        merged.update(_read_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    store_root = _ensure_dir(Path(merged["store_root"]), "store_root")
    outbox = _ensure_dir(Path(merged["outbox"]), "outbox")
    workflow_log = Path(merged["workflow_log"] or store_root / "workflow.jsonl")

    risk_config = Path(merged["risk_config"]) if merged["risk_config"] else None
    if risk_config is not None:
        from sheetguard.risk import load_risk_config

        try:
            load_risk_config(risk_config)
        except InvalidConfig as e:
            raise ConfigError(str(e)) from e

    users = merged["users"]
    if not isinstance(users, dict) or not all(isinstance(v, str) for v in users.values()):
        raise ConfigError("users must map user names to passwords")

    level = str(merged["log_level"]).upper()
    if level not in _VALID_LEVELS:
        raise ConfigError(f"unknown log level: {merged['log_level']}")

    return CliConfig(
        store_root=store_root,
        outbox=outbox,
        workflow_log=workflow_log,
        bind=parse_bind(merged["bind"]),
        risk_config=risk_config,
        users=dict(users),
        log_level=level,
        log_file=Path(merged["log_file"]) if merged["log_file"] else None,
        subscriptions=_subscriptions(merged["subscriptions"]),
    )

