"""Exception hierarchy shared by every mvlab module."""


class LabError(Exception):
    """Base class for all mvlab errors."""


class InvalidParameterError(LabError, ValueError):
    pass


class InvalidInputError(LabError, ValueError):
    pass


class DivergenceUndefinedError(LabError, ValueError):
    """KL(p || q) is infinite because q vanishes where p does not."""


class ContractError(LabError):
    """Shape or call-contract violation."""


class ConfigurationError(LabError, ValueError):
    pass


class InfeasibleOrthogonalityError(InvalidParameterError):
    pass


class AttackFailureError(LabError):
    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = list(indices) if indices is not None else []


class TrainingDivergedError(LabError):
    def __init__(self, epoch, message=None):
        super().__init__(message or f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


class FormatError(LabError, ValueError):
    """Malformed MVDS/CKPT file."""
