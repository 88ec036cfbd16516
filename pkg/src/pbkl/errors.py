"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's shape rule."""


class NumericError(ArithmeticError):
    """Non-finite values or a domain violation inside an op."""


class ConfigError(ValueError):
    """Invalid configuration or degenerate input set."""


class MissingPBError(KeyError):
    """A demonstration id has no parametric bias in the table."""


class NegativeUnavailableError(LookupError):
    """No demonstration with the opposite label exists."""


class IntegrityError(RuntimeError):
    """Artifacts on disk are inconsistent (missing demos, overlaps, bad versions)."""


class DivergenceAbort(RuntimeError):
    """Training stopped because the KL term ran away."""
