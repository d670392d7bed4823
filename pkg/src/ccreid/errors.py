class ContractError(ValueError):
    """An argument violates an operation's shape or range precondition."""


class ManifestError(ValueError):
    """Malformed or inconsistent manifest."""


class ConfigurationError(ValueError):
    pass


class CheckpointError(RuntimeError):
    """Checkpoint is unreadable, corrupted or incompatible."""


class EvaluationError(RuntimeError):
    pass
