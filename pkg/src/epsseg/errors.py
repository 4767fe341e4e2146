"""Exception types shared across the package.

Each maps onto one CLI exit code (see ``epsseg.cli``).
"""


class EpsSegError(Exception):
    exit_code = 1


class ConfigError(EpsSegError, ValueError):
    exit_code = 2


class DataError(EpsSegError, ValueError):
    exit_code = 3


class NumericError(EpsSegError, ArithmeticError):
    exit_code = 4
