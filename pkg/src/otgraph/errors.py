"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class InputError(ValueError):
    """Runtime input (marginals, labels, sample data) violates a precondition."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class DataError(ValueError):
    """A dataset file is missing, corrupt, or inconsistent with its manifest."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""
