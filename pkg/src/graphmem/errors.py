"""Shared error base so the CLI can map any domain failure to exit code 1."""


class DomainError(Exception):
    """Base class for all domain-level failures raised by this package."""

    code = "DomainError"
