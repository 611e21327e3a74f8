"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameters."""


class ContractError(ValueError):
    """An argument violates a documented shape or value contract."""


class TrainingError(RuntimeError):
    """Training diverged or hit a degenerate state.

    Attributes:
        last_checkpoint: Path of the most recent good checkpoint, if any.
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
