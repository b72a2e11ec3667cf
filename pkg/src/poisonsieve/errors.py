"""Exception types shared across the package."""


class PoisonSieveError(Exception):
    """Base class for all package errors."""


class DimensionError(PoisonSieveError):
    """Tensor shapes incompatible with the requested operation."""


class NumericOverflowError(PoisonSieveError):
    """An operation produced a non-finite value from finite inputs."""


class ContractError(PoisonSieveError):
    """A caller violated an operation's precondition."""


class ConfigError(PoisonSieveError):
    """Invalid or inconsistent configuration value."""


class FormatError(PoisonSieveError):
    """Malformed file contents (binary tensor, dataset record, manifest)."""


class TrainingError(PoisonSieveError):
    """Training failed (divergence, no loss improvement)."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class CraftingError(PoisonSieveError):
    """Poison crafting failed (non-finite objective, degenerate gradients)."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class DegenerateVectorError(PoisonSieveError):
    """Cosine distance requested against a zero-norm vector."""
