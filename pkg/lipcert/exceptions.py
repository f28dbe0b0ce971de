# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

"""Errors raised by lipcert."""


class LipcertError(Exception):
    """Base class of the library errors."""


class ParseError(LipcertError):
    """A model, problem or solution file could not be parsed."""


class DimensionError(LipcertError, ValueError):
    """Matrix or vector dimensions are inconsistent."""


class ConvergenceError(LipcertError):
    """An iterative procedure did not converge."""


class Unsupported(LipcertError):
    """The operation is not available for this architecture or activation."""


class PreconditionError(LipcertError):
    """A prerequisite certificate is missing."""


class TooLarge(LipcertError):
    """The requested enumeration exceeds its guard."""
