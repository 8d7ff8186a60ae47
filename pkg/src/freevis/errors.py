"""Exception types shared across the package."""


class FreeVisError(Exception):
    """Base class for all package errors."""


class InvalidTensor(FreeVisError, ValueError):
    pass


class ShapeError(FreeVisError, ValueError):
    pass


class FormatError(FreeVisError, ValueError):
    """Raised for malformed binary grid / mask / flow files."""


class ConfigError(FreeVisError, ValueError):
    pass


class NumericalError(FreeVisError, ArithmeticError):
    """Non-finite iterates or unexpected imaginary residue."""
