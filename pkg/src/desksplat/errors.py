"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad field values, mismatched coefficient
    lengths, unknown config keys, inconsistent dataset layout."""


class ContractError(ValueError):
    """A caller violated an operation precondition (shape/dimension
    mismatch, tape reused against the wrong inputs, ...)."""


class NumericsError(RuntimeError):
    """Training hit a non-finite loss or gradient and aborted.

    ``iteration`` is the step at which the abort happened;
    ``last_checkpoint`` points at the most recent good checkpoint, if any.
    """

    def __init__(self, message, iteration=None, last_checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint


class DataError(ValueError):
    """Malformed dataset on disk (bad JSON/PNG, split inconsistency)."""
