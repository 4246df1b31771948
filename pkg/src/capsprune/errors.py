"""Exception hierarchy shared by every module of the toolkit."""


class CapsPruneError(Exception):
    """Base class for all typed errors raised by capsprune."""


class DimensionError(CapsPruneError, ValueError):
    """Tensor shapes do not agree with what an operation requires."""


class ArgumentError(CapsPruneError, ValueError):
    """An argument is outside its allowed range."""


class InvariantError(CapsPruneError, RuntimeError):
    """An internal data-structure invariant was violated."""


class NumericError(CapsPruneError, ArithmeticError):
    """A floating-point operation overflowed or produced NaN."""


class ParseError(CapsPruneError, ValueError):
    """Malformed dataset file."""


class BadMagicError(ParseError):
    pass


class TruncatedError(ParseError):
    pass


class CountMismatchError(ParseError):
    pass


class CheckpointError(CapsPruneError, ValueError):
    """Malformed or inconsistent checkpoint file."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    pass


class SurvivorMismatchError(CheckpointError):
    pass
