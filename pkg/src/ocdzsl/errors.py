"""Shared exception types, one per failure category."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A scalar knob or argument is outside its legal range."""


class StateError(RuntimeError):
    """An operation needs state that is absent or already consumed."""


class NumericError(ArithmeticError):
    """NaN or Inf appeared where finite math was promised."""


class FormatError(ValueError):
    """A file is malformed; the message names the file and offset."""


class DataError(ValueError):
    """A dataset or split violates a documented invariant."""


class ProtocolError(ValueError):
    """Model and dataset do not fit the requested evaluation protocol."""
