"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class OlrSimError(Exception):
    exit_code = 1


class ConfigError(OlrSimError, ValueError):
    exit_code = 2


class DomainError(OlrSimError, ValueError):
    exit_code = 3


class UndefinedRatioError(DomainError):
    """Raised when a probability ratio involves an infeasible (zero-probability) label."""


class UpdateError(OlrSimError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, prompt_id=None):
        super().__init__(message)
        self.prompt_id = prompt_id


class StateError(OlrSimError, RuntimeError):
    exit_code = 5


class OutputError(OlrSimError, OSError):
    exit_code = 6
