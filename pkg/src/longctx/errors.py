"""Shared exception types."""


class LongCtxError(Exception):
    """Base class for all package errors."""


class UsageError(LongCtxError):
    """A caller violated an operation's precondition."""


class ShapeError(LongCtxError):
    """Array shapes are inconsistent with an operation's shape rule."""


class NumericError(LongCtxError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class DataError(LongCtxError):
    """A corpus file or record is malformed."""
