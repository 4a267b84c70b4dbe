"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 usage, 3 data/config, 4 numeric failure.
"""


class TwinVitError(Exception):
    exit_code = 3


class ShapeError(TwinVitError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(TwinVitError, ValueError):
    """A scalar parameter is outside its domain."""


class ConfigError(TwinVitError, ValueError):
    """A configuration value or resolution is not supported."""


class GraphError(TwinVitError, RuntimeError):
    """Misuse of the autodiff graph (e.g. a second backward pass)."""


class StateError(TwinVitError, RuntimeError):
    """An object is not in the state an operation requires."""


class NumericError(TwinVitError, FloatingPointError):
    exit_code = 4


class DataError(TwinVitError):
    """Input data could not be read or is inconsistent."""


class ParseError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ManifestError(DataError):
    pass


class StratificationError(DataError):
    pass


class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class LayoutError(CheckpointError):
    """Declared shapes disagree with the bytes actually present."""
