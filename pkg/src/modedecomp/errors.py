"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have non-conformal dimensions."""


class NonFiniteError(ValueError):
    """An input or an intermediate quantity contains NaN or inf."""


class SolverInstabilityError(ArithmeticError):
    """Explicit time stepping blew up."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"solution became non-finite at time step {step}")


class StaleCacheError(RuntimeError):
    """A forward cache was passed to backward with different parameters."""


class TrainingDivergedError(ArithmeticError):
    """Loss exceeded the divergence threshold."""


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
