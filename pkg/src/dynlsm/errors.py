"""Exception hierarchy. ``exit_code`` is what the CLI returns for each."""


class DynLSMError(Exception):
    exit_code = 1


class ConfigError(DynLSMError, ValueError):
    exit_code = 2


class DataError(DynLSMError, ValueError):
    exit_code = 3


class InvalidInputError(DataError):
    """A value outside the domain of an operation (NaN, out of range, ...)."""


class NoDataError(DataError):
    """An operation was asked to act on an empty task or raster."""


class DivergenceError(DynLSMError, ArithmeticError):
    exit_code = 4
