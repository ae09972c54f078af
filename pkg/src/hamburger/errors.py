"""Exception hierarchy shared across the package."""


class HamburgerError(Exception):
    pass


class DimensionError(HamburgerError, ValueError):
    pass


class ConfigError(HamburgerError, ValueError):
    pass


class VocabularyError(HamburgerError, IndexError):
    pass


class OrderingError(HamburgerError, ValueError):
    """Cache positions must be strictly increasing."""


class CapacityError(HamburgerError, RuntimeError):
    pass


class DataError(HamburgerError, ValueError):
    pass


class NumericError(HamburgerError, FloatingPointError):
    pass


class InvariantError(HamburgerError, AssertionError):
    pass


class EmptyMaskWarning(UserWarning):
    """A loss was requested over a mask with no selected rows."""


class MaskError(HamburgerError, ValueError):
    """An attention query row has no visible key."""


class ArgumentError(HamburgerError, ValueError):
    pass
