"""Shared exception types with machine-parseable codes."""

from __future__ import annotations


class ValidationError(ValueError):
    """Bad inputs, files or configuration. CLI exit code 1."""

    code = "VALIDATION"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ConfigurationError(ValidationError):
    code = "CONFIG"


class DivergenceError(RuntimeError):
    """Training left the finite range. CLI exit code 2."""

    code = "DIVERGENCE"

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
