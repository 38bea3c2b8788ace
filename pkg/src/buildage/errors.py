"""Exception types shared across the pipeline.

Every error carries an ``exit_code`` so the command line layer can map
failures onto its documented exit codes: 1 = configuration problem,
2 = file system / decoding problem, 3 = bad data.
"""


class PipelineError(Exception):
    """Base class for all pipeline failures."""

    exit_code = 3


class ConfigError(PipelineError):
    """Invalid configuration value, unknown key, or bad command usage."""

    exit_code = 1


class IoError(PipelineError):
    """A file could not be read or written."""

    exit_code = 2


class DecodeError(IoError):
    """A file exists but its contents cannot be decoded."""


class ParseError(PipelineError):
    """Malformed tabular input. Carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingColumnError(ParseError):
    """A required header column is absent."""


class OutOfRangeError(PipelineError):
    """A value falls outside its documented domain."""


class EmptyInputError(PipelineError):
    """An operation that needs at least one element received none."""


class OutOfBoundsError(PipelineError):
    """A patch geometry does not fit inside its source image."""


class PatchTooSmallError(PipelineError):
    """A patch is below the minimum side length for descriptor extraction."""


class NormalizedInputError(PipelineError):
    """An operation defined on unnormalized descriptors got a normalized one."""


class DegenerateDatasetError(PipelineError):
    """A training set with fewer than two distinct labels."""


class ShapeMismatchError(PipelineError):
    """Array dimensions disagree with the model or with each other."""


class WrongClassCountError(PipelineError):
    """A model with the wrong number of output classes for the task."""


class LengthMismatchError(PipelineError):
    """Two paired sequences differ in length."""


class NoPatchesError(PipelineError):
    """An image yields no patch candidates at the configured scales."""
