"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its contract."""


class ConfigurationError(ValueError):
    """A config object is internally inconsistent or references unknown names."""


class LoadError(IOError):
    """A persisted artifact is malformed, truncated, or fails validation."""


class EmptyMaskError(ValueError):
    """A surface-distance metric was asked to operate on an empty mask."""


class NoInstancesError(ValueError):
    """Zone accuracy was requested for a case without any node instances."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; carries epoch and case id."""

    def __init__(self, epoch: int, case_id: str, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, case {case_id!r}")
        self.epoch = epoch
        self.case_id = case_id


class LeakageError(RuntimeError):
    """A cross-validation fold touched a test case during training."""
