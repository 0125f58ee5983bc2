"""Exception hierarchy shared across the package.

Each class carries an ``exit_code`` used by the command-line front end.
"""


class OvalsegError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(OvalsegError, ValueError):
    category = "config"
    exit_code = 2


class InvalidInputError(OvalsegError, ValueError):
    category = "invalid-input"
    exit_code = 3


class ShapeError(InvalidInputError):
    category = "shape"


class FormatError(OvalsegError):
    category = "format"
    exit_code = 3


class InvalidStateError(OvalsegError, RuntimeError):
    category = "invalid-state"
    exit_code = 4


class NumericError(OvalsegError, FloatingPointError):
    category = "numeric"
    exit_code = 4
