"""Exception hierarchy shared by every module."""


class SwinQuantError(Exception):
    """Base class for all package errors."""


class ShapeError(SwinQuantError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(SwinQuantError, ValueError):
    """A scalar argument is outside its legal range."""


class ContractError(SwinQuantError):
    """A model or pipeline precondition is violated (e.g. GELU-less on an undistilled model)."""


class UnsupportedPrimitiveError(SwinQuantError):
    """Backward was requested through an operation that has no gradient rule."""


class ContainerFormatError(SwinQuantError, OSError):
    """A checkpoint file is truncated or malformed."""
