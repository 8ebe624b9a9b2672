"""Exception hierarchy shared across the package."""


class EncodeNetError(Exception):
    """Base class for all errors raised by encodenet."""


class ShapeError(EncodeNetError, ValueError):
    """Incompatible tensor or layer dimensions."""


class NumericError(EncodeNetError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class TapeError(EncodeNetError, RuntimeError):
    """Misuse of the computation tape (e.g. a second backward pass)."""


class SpecSyntaxError(EncodeNetError, ValueError):
    """Model-spec text that does not follow the grammar."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SpecValidationError(EncodeNetError, ValueError):
    """A ModelSpec that parses but violates a structural invariant."""


class SplitError(EncodeNetError, ValueError):
    pass


class SynthesisError(EncodeNetError, ValueError):
    pass


class DatasetError(EncodeNetError, ValueError):
    """Malformed or inconsistent dataset files."""


class ConfigError(EncodeNetError, ValueError):
    pass


class CheckpointError(EncodeNetError, ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


class ClusteringError(EncodeNetError, ValueError):
    pass


class EntropyError(EncodeNetError, ValueError):
    pass


class AssemblyError(EncodeNetError, ValueError):
    pass


class PrerequisiteError(EncodeNetError, RuntimeError):
    """A pipeline stage was requested before the artifacts it consumes exist."""
