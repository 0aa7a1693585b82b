"""
SheetGuard: spreadsheet governance toolkit.

Inventory and risk-rate spreadsheets, map their link dependencies,
migrate them into a versioned WebDAV repository, audit cell-level
changes and run change requests through review and approval.
"""

__version__ = "0.1.0"
