"""Exception types shared across the package."""


class ErrWhitenError(Exception):
    """Base class for library errors."""


class DecompositionError(ErrWhitenError):
    """A dense decomposition failed to converge."""


class DomainError(ErrWhitenError, ValueError):
    """An input lies outside the domain where an operation is defined."""


class ShapeError(ErrWhitenError, ValueError):
    pass


class CapacityError(ErrWhitenError):
    """A dense object would exceed the materialization guard."""


class UnsupportedError(ErrWhitenError):
    """The requested (loss, matrix) or (loss, optimizer) pair has no definition."""


class ConfigError(ErrWhitenError, ValueError):
    pass


class NumericalError(ErrWhitenError, FloatingPointError):
    pass


class EmptySketchError(ErrWhitenError):
    """The sketch retained no eigenpairs above tolerance."""


class LineSearchError(ErrWhitenError):
    pass


class FormatError(ErrWhitenError, ValueError):
    pass
