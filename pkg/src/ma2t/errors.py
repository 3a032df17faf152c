"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Tensor shapes do not conform for the requested primitive."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""


class InfeasibleScenarioError(RuntimeError):
    """The expert planner has no in-corridor candidate for some step."""
