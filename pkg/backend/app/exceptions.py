"""exceptions.py

Error hierarchy shared by all services. Every domain error is also a
ValueError (or OSError for I/O) so callers catching the builtin keep working.
"""


class PassbyError(Exception):
    """Base class for all errors raised by the toolkit."""


class AudioFormatError(PassbyError, ValueError):
    """The file is not a readable WAV container or its header is malformed."""


class UnsupportedAudioError(PassbyError, ValueError):
    """The WAV container holds a codec other than integer or float PCM."""


class ManifestSchemaError(PassbyError, ValueError):
    """The manifest CSV is missing required columns."""


class AnnotationError(PassbyError, ValueError):
    """One or more annotations violate their invariants.

    Attributes:
        problems (list[str]): One message per offending row/entry.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        joined = "; ".join(self.problems)
        super().__init__(f"{len(self.problems)} invalid annotation(s): {joined}")


class InvalidDataError(PassbyError, ValueError):
    """Training data contains non-finite values or too few samples."""


class ShapeError(PassbyError, ValueError):
    """Array dimensions do not agree."""


class ConfigurationError(PassbyError, ValueError):
    """A configuration value is unusable for the requested operation."""


class PreconditionError(PassbyError, ValueError):
    """An operation was called outside its precondition."""


class TrainingError(PassbyError, ValueError):
    """Training diverged.

    Attributes:
        epoch (int): Zero-based epoch at which the loss became non-finite.
    """

    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        super().__init__(f"Epoch {epoch}: {message}")


class DomainError(PassbyError, ValueError):
    """A physical quantity is outside the domain of a formula."""


class AudioWriteError(PassbyError, OSError):
    """Writing an audio file failed."""
