"""Exception types mapped to CLI exit codes (input=1, config=2, numerical=3)."""


class InputError(ValueError):
    """Bad runtime input: malformed image, non-finite pixels, missing file."""

    exit_code = 1


class ConfigurationError(ValueError):
    """Bad configuration: unknown backbone, inconsistent plan, bad archive."""

    exit_code = 2


class NumericalError(RuntimeError):
    """Numerical failure: non-finite loss, broken transform round trip."""

    exit_code = 3
