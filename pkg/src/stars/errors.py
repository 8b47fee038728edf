"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see ``stars.cli``).
"""


class StarsError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(StarsError, ValueError):
    pass


class DomainError(StarsError, ValueError):
    pass


class ContractError(StarsError, RuntimeError):
    pass


class ParseError(StarsError, ValueError):
    pass


class VersionError(ParseError):
    pass


class ConfigError(StarsError, ValueError):
    """Invalid experiment configuration; ``path`` is the dotted key path."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class MissingArtifactError(StarsError, FileNotFoundError):
    pass


class NumericalError(StarsError, ArithmeticError):
    """Raised when a loss turns NaN/inf; carries the step and loss breakdown."""

    def __init__(self, message, step=None, components=None):
        self.step = step
        self.components = dict(components or {})
        detail = ""
        if step is not None:
            detail += f" at step {step}"
        if self.components:
            detail += " (" + ", ".join(f"{k}={v!r}" for k, v in self.components.items()) + ")"
        super().__init__(message + detail)
