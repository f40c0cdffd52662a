"""Exception types shared across the package."""


class PipeBalanceError(Exception):
    """Base class for all errors raised by pipebalance."""


class ValidationError(PipeBalanceError, ValueError):
    """An input violates a documented precondition."""


class StructuralError(PipeBalanceError, ValueError):
    """Inputs are mutually inconsistent (mismatched lengths, unknown tags, stale plans)."""


class InfeasibleError(PipeBalanceError):
    """No memory-feasible placement exists for the requested configuration.

    ``iteration`` is filled in by the scenario runner when the failure happens
    mid-run.
    """

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration

    def __str__(self) -> str:
        base = super().__str__()
        if self.iteration is None:
            return base
        return f"iteration {self.iteration}: {base}"
