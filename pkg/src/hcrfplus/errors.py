"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI uses when it escapes a
command.
"""


class HcrfError(Exception):
    exit_code = 1


class ConfigurationError(HcrfError):
    exit_code = 2


class SchemaError(HcrfError, ValueError):
    exit_code = 3


class InvalidInputError(SchemaError):
    """Arguments that violate an operation's preconditions."""


class CapacityError(InvalidInputError):
    """Brute-force enumeration would exceed the configured cap."""


class VersionError(SchemaError):
    pass


class NumericalFailureError(HcrfError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, iteration=None, report=None):
        super().__init__(message)
        self.iteration = iteration
        self.report = report
