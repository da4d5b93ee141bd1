"""Exception types shared across the toolkit."""

from __future__ import annotations


class ConfexError(Exception):
    """Base class for all toolkit errors."""


class TensorFormatError(ConfexError):
    """Raised when a tensor file cannot be parsed.

    Carries the byte offset at which parsing failed so corrupt files can
    be diagnosed without a hex editor.
    """

    def __init__(self, message: str, byte_offset: int | None = None):
        self.byte_offset = byte_offset
        if byte_offset is not None:
            message = f"{message} (at byte offset {byte_offset})"
        super().__init__(message)


class ManifestError(ConfexError):
    """Raised for structurally invalid or inconsistent dataset manifests."""


class PredictorTransportError(ConfexError):
    """Raised when a subprocess predictor dies or violates the wire protocol.

    `context` holds whatever frame fragment was available when the failure
    occurred, to aid debugging of misbehaving servers.
    """

    def __init__(self, message: str, context: str | None = None):
        self.context = context
        if context:
            message = f"{message} [frame context: {context}]"
        super().__init__(message)


class DataIntegrityError(ConfexError):
    """Raised when pipeline artifacts disagree (digest mismatches and the like)."""
