"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class Co4Error(Exception):
    exit_code = 1


class ShapeError(Co4Error, ValueError):
    exit_code = 2


class ConfigError(Co4Error, ValueError):
    exit_code = 2


class FormatError(Co4Error, ValueError):
    exit_code = 3


class NumericError(Co4Error, FloatingPointError):
    exit_code = 4
