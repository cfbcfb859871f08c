"""Exception types shared across the package.

The CLI maps these onto exit codes: config/validation problems exit 2,
runtime failures (numeric blow-ups, aborted training) exit 1.
"""


class SchemaError(ValueError):
    """Input file header does not match the documented dataset schema."""


class ParseError(ValueError):
    """A cell could not be parsed; message carries the file line number."""


class ValidationError(ValueError):
    """A record violates a dataset invariant (e.g. sigma_a >= UTS)."""


class DomainError(ValueError):
    """A feature formula was evaluated outside its domain."""


class ConfigError(ValueError):
    """Invalid configuration value (unknown variant, bad split size, ...)."""


class ShapeError(ValueError):
    """Tensor operands have incompatible shapes for the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf; message names the producing op."""


class TrainingAbort(RuntimeError):
    """Training hit a numeric failure; carries epoch and batch indices."""

    def __init__(self, epoch: int, batch: int, cause: str):
        super().__init__(f"training aborted at epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch
