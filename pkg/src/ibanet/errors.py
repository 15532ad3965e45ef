"""Exception types shared across the package.

Each maps to a stable CLI exit code (see ``ibanet.cli``): config problems
exit 2, data/parse problems exit 3, numerical divergence exits 4.
"""


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's shape rule."""


class ParameterError(ValueError):
    """A numeric hyperparameter is outside its valid range."""


class ContractError(RuntimeError):
    """An API was called in a way that violates its contract."""


class ConfigError(ValueError):
    """Unknown or malformed configuration key/value."""


class ParseError(ValueError):
    """Malformed input data file.

    Carries the 1-based line number of the offending row when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.

    Records where the divergence happened so the CLI can report it.
    """

    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
