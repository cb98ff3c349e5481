"""Exception hierarchy shared across the package."""


class TlabError(Exception):
    pass


class ShapeError(TlabError, ValueError):
    pass


class ContractError(TlabError, RuntimeError):
    pass


class ArchError(TlabError, ValueError):
    pass


class TrainingError(TlabError, ArithmeticError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) in epoch {epoch}")


class LoadError(TlabError, IOError):
    pass


class VersionError(LoadError):
    pass


class TruncatedError(LoadError):
    pass


class ChecksumError(LoadError):
    pass


class ConfigError(TlabError, ValueError):
    pass


class ModelCompatibilityError(ConfigError):
    """Models in one roster disagree on input shape or class count."""


class AttackError(TlabError, ArithmeticError):
    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite gradient at iteration {iteration}")


class MetricError(TlabError, ValueError):
    pass


class LabelError(TlabError, IndexError):
    pass
