"""Exception types shared across the package."""


class SlamError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SlamError, ValueError):
    pass


class GimbalLockError(InvalidArgumentError):
    pass


class RankError(InvalidArgumentError):
    """Point configuration is degenerate (collinear or too few points)."""


class MiningError(SlamError):
    pass


class TrainingError(SlamError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DisconnectedGraphError(SlamError):
    def __init__(self, orphans):
        self.orphans = sorted(orphans)
        preview = ", ".join(str(i) for i in self.orphans[:20])
        more = "" if len(self.orphans) <= 20 else f" (+{len(self.orphans) - 20} more)"
        super().__init__(f"nodes not connected to the anchor: {preview}{more}")


class DivergenceError(SlamError):
    pass


class ConfigError(SlamError, ValueError):
    pass


class StageError(SlamError):
    """A pipeline stage failed; carries the stage name for exit-code mapping."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
