"""
Exceptions raised across the package.

`main.py` maps them to exit codes:

- 2  ConfigurationError, InputError (usage / bad inputs)
- 3  DivergenceError (non-finite numbers during training or integration)
"""


class BranchflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BranchflowError, ValueError):
    """Invalid configuration, shapes or arguments."""


class InputError(BranchflowError):
    """Missing or mismatched input files."""


class ContractViolation(BranchflowError, RuntimeError):
    """A documented precondition of an operation was broken."""


class DivergenceError(BranchflowError, ArithmeticError):
    """Non-finite values appeared in a numerical computation."""


class IntegrationDivergedError(DivergenceError):
    """RK4 produced a non-finite state at `time`."""

    def __init__(self, time):
        super().__init__(f'Integration diverged at t={time:.6g}')
        self.time = time


class TrainingDivergedError(DivergenceError):
    """
    Training produced non-finite residuals at `epoch`.

    `report` holds the TrainingReport up to the failure (if any).
    """

    def __init__(self, epoch, report=None):
        super().__init__(f'Training diverged at epoch {epoch}')
        self.epoch = epoch
        self.report = report
