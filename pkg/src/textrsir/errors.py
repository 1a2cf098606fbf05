"""Exception hierarchy shared by every stage of the pipeline."""


class TextRSIRError(Exception):
    """Base class for all package errors."""


class DimensionError(TextRSIRError, ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class ArgumentError(TextRSIRError, ValueError):
    """A scalar argument is outside its permitted range."""


class FormatError(TextRSIRError, ValueError):
    """A byte blob is tagged with an unexpected container format."""


class DecodeError(TextRSIRError, ValueError):
    """A compressed stream is truncated or corrupt."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(TextRSIRError, ValueError):
    """Malformed manifest line or violated manifest invariant."""


class MissingCaptionError(TextRSIRError, KeyError):
    """A cached caption provider has no entry for an id."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing caption"


class CaptionTransportError(TextRSIRError, RuntimeError):
    """A remote caption request failed after all retries."""

    def __init__(self, message, retries=0):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


class ConfigurationError(TextRSIRError, ValueError):
    """Model, frontend, or run configuration is invalid."""


class PreparationError(TextRSIRError, FileNotFoundError):
    """Prepared CLR/caption files are missing for some records."""

    def __init__(self, message, ids=()):
        ids = list(ids)
        if ids:
            message = f"{message}: {', '.join(ids)}"
        super().__init__(message)
        self.ids = ids


class TrainingError(TextRSIRError, RuntimeError):
    """Optimization diverged (non-finite loss)."""
