"""Exception hierarchy shared by every module.

Each error carries the CLI exit code it maps to so the command layer can
translate failures without a lookup table.
"""


class LSPError(Exception):
    exit_code = 1


class ConfigError(LSPError, ValueError):
    exit_code = 2


class ShapeError(LSPError, ValueError):
    exit_code = 2


class ParseError(LSPError):
    exit_code = 3


class FormatError(LSPError):
    exit_code = 3


class NumericError(LSPError, ArithmeticError):
    exit_code = 4


class DegenerateNeighborhoodError(NumericError):
    """All anchor-to-neighbor distances are zero, so no structure vector exists."""
