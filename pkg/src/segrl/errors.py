"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class TrainingFault(RuntimeError):
    """Non-finite loss or other unrecoverable optimisation failure."""


class CheckpointError(RuntimeError):
    """Checkpoint is corrupt or does not match the current architecture."""
