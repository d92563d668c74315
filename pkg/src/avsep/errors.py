"""Exception vocabulary shared across the package."""


class InputError(ValueError):
    """An operation received data that violates its preconditions."""


class ConfigError(ValueError):
    """Configuration values are inconsistent or do not match an artifact."""


class DegenerateInputError(InputError):
    """Input is technically well-formed but unusable (e.g. a silent clip)."""


class GenerationError(RuntimeError):
    """Procedural generation could not satisfy its constraints."""

    def __init__(self, message, seed=None):
        super().__init__(message)
        self.seed = seed


class PolicyCorruptionError(RuntimeError):
    """A policy produced non-finite logits or probabilities."""


class UpdateRejectedError(RuntimeError):
    """An optimizer update was rejected (non-finite gradient)."""

    def __init__(self, message, param_name=None):
        super().__init__(message)
        self.param_name = param_name
