"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters: DataError -> 2, NumericalError -> 3, CheckFailure -> 4.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all package errors."""


class DataError(EngineError):
    """Malformed or inconsistent external input (files, schemas, shapes)."""


class NumericalError(EngineError):
    """Non-finite values or numerically degenerate configurations."""


class CheckFailure(EngineError):
    """A self-check (gradient check, acceptance run) did not meet tolerance."""
