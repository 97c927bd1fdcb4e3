"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Array extents do not agree with what an operation requires."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class TrainingError(RuntimeError):
    """Training diverged or failed to reach its quality floor."""


class ConfigurationError(ValueError):
    """Components or configuration values are mutually inconsistent."""


class MissingArtifactError(RuntimeError):
    """An upstream pipeline stage has not produced its artifacts yet."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"missing artifacts from stage '{stage}'; run `casl run --stage {stage}` first"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class StaleArtifactError(RuntimeError):
    """Artifacts on disk were produced under a different configuration."""


class DataError(ValueError):
    """Input data violates a precondition (e.g. class balance)."""


class LockError(RuntimeError):
    """Another process holds the output directory's lock."""
