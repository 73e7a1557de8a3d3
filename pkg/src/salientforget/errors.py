"""Exception hierarchy shared by the library and the command-line runner."""


class UnlearnError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class DataFormatError(UnlearnError):
    exit_code = 2


class InputError(UnlearnError, ValueError):
    exit_code = 2


class ConfigError(UnlearnError, ValueError):
    exit_code = 3


class UsageError(UnlearnError, ValueError):
    """API misuse, e.g. incongruent gradients and masks."""

    exit_code = 3


class EmptyIteratorError(UsageError):
    pass


class NumericError(UnlearnError, ArithmeticError):
    exit_code = 4
