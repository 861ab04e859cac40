"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class FsnerError(Exception):
    exit_code = 2


class ValidationError(FsnerError, ValueError):
    exit_code = 1


class CorpusParseError(ValidationError):
    pass


class CatalogError(ValidationError):
    pass


class TagValidationError(ValidationError):
    pass


class SpecError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SamplingError(FsnerError):
    pass


class PromptOverflowError(FsnerError):
    """Rendered prompt longer than the cutoff; never truncated silently."""


class AlignmentError(FsnerError):
    """A word-level span boundary falls inside a merged subword token."""


class CapacityError(FsnerError):
    pass


class AdapterFormatError(FsnerError):
    pass


class ChecksumError(AdapterFormatError):
    pass


class StageTagError(AdapterFormatError):
    pass


class NumericAbort(FsnerError):
    """Non-finite loss or objective; carries diagnostics in the message."""

    exit_code = 3
