"""Exception types shared across the package.

The split mirrors how failures are reported: validation errors are wrong
inputs caught before any numerical work, integration errors are genuine
numerical failures, and parse errors carry a position into the offending
text.  The command-line layer maps each class to its own exit status.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class NoQuantumDualError(ValidationError):
    """Force-law parameters are inconsistent with any single quantum energy."""


class AsymptoteError(ValidationError):
    """A trajectory has no linear asymptote on the requested side."""


class SourceParseError(ValueError):
    """A source-term expression failed to parse; carries the bad position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class IntegrationError(RuntimeError):
    """The integrator failed to deliver a certified solution."""
