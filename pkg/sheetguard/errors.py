"""
Errors
---------------------------------------------------------
Exception hierarchy shared by every sheetguard module.

All errors derive from SheetGuardError so the CLI can map them to
exit code 1 in one place. Grouping bases (PackageError, QueryError,
RepositoryError, ...) let callers catch a whole family.
"""

from __future__ import annotations


class SheetGuardError(Exception):
    """Base class for every error raised by sheetguard."""


class ConfigError(SheetGuardError):
    """Invalid or unreadable configuration."""


# =====================================================================
# Grid model / formulas
# =====================================================================

class MalformedAddress(SheetGuardError, ValueError):
    def __init__(self, text: str, reason: str = "not an A1 address"):
        super().__init__(f"{reason}: {text!r}")
        self.text = text


class MalformedFormula(SheetGuardError, ValueError):
    def __init__(self, formula: str, offset: int, reason: str):
        super().__init__(f"{reason} at offset {offset} in {formula!r}")
        self.formula = formula
        self.offset = offset


# =====================================================================
# OOXML packages
# =====================================================================

class PackageError(SheetGuardError):
    """Base for package read/write failures."""


class NotAPackage(PackageError):
    """The bytes are not a ZIP archive."""


class NotASpreadsheet(PackageError):
    """A ZIP archive without the spreadsheet parts."""


class CorruptPart(PackageError):
    def __init__(self, part: str, reason: str):
        super().__init__(f"corrupt part {part}: {reason}")
        self.part = part
        self.reason = reason


# =====================================================================
# Discovery / queries
# =====================================================================

class RootNotFound(SheetGuardError):
    def __init__(self, root: str):
        super().__init__(f"scan root not found or not a directory: {root}")
        self.root = root


class QueryError(SheetGuardError):
    """Base for query language errors."""


class QuerySyntaxError(QueryError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnknownField(QueryError):
    def __init__(self, field: str, offset: int = 0):
        super().__init__(f"unknown field: {field}")
        self.field = field
        self.offset = offset


# =====================================================================
# Risk / migration / change audit
# =====================================================================

class InvalidConfig(SheetGuardError):
    """RiskConfig violates its invariants."""


class MigrationError(SheetGuardError):
    """Base for migration planning and execution failures."""


class EmptySelection(MigrationError):
    """No workbooks were selected for migration."""


class RepositoryUnreachable(MigrationError):
    """The target repository did not answer before any write."""


class OutboxUnwritable(SheetGuardError):
    """The alert outbox directory cannot be written."""


# =====================================================================
# Workflow
# =====================================================================

class WorkflowError(SheetGuardError):
    """Base for change-request workflow errors."""


class UnknownVersion(WorkflowError):
    pass


class NoChange(UnknownVersion):
    """Proposed version equals the base version."""


class DuplicateId(WorkflowError):
    pass


class UnknownRequest(WorkflowError):
    pass


class IllegalTransition(WorkflowError):
    pass


class SeparationOfDuties(WorkflowError):
    pass


class BadSignature(WorkflowError):
    pass


class MissingSignature(WorkflowError):
    pass


class CorruptLog(WorkflowError):
    pass


# =====================================================================
# Repository store
# =====================================================================

class RepositoryError(SheetGuardError):
    """Base for repository store errors."""


class Locked(RepositoryError):
    def __init__(self, path: str, owner: str = ""):
        detail = f" by {owner}" if owner else ""
        super().__init__(f"{path} is locked{detail}")
        self.path = path
        self.owner = owner


class InvalidPath(RepositoryError):
    pass


class StorageFailure(RepositoryError):
    pass


class NotFound(RepositoryError):
    pass


class GoneVersion(RepositoryError):
    pass


class BadToken(RepositoryError):
    pass


class InvalidPolicy(RepositoryError):
    pass


class AlreadyExists(RepositoryError):
    pass
