"""Exception hierarchy shared by every hintu module."""


class HintError(Exception):
    """Base class for all library errors."""


class ShapeError(HintError, ValueError):
    pass


class ConfigError(HintError, ValueError):
    pass


class DegenerateVarianceError(HintError, ValueError):
    pass


class TokenLimitError(HintError, ValueError):
    pass


class NonFiniteError(HintError, ArithmeticError):
    pass


class DatasetError(HintError, ValueError):
    pass


class CheckpointError(HintError):
    """Raised for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
