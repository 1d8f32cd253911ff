"""Exception types raised across the package."""


class ProbfError(Exception):
    """Base class for all package errors."""


class ContractViolation(ProbfError, ValueError):
    """Inputs do not satisfy an operation's preconditions (shapes, ranges)."""


class IntegrationBlowup(ProbfError):
    """A non-finite state appeared during integration.

    ``step_index`` is the step at which the blowup happened and
    ``trajectory`` (when set) carries the partial rollout up to that point.
    """

    def __init__(self, message, step_index=None, trajectory=None):
        super().__init__(message)
        self.step_index = step_index
        self.trajectory = trajectory


class StructuralError(ProbfError):
    """The barrier chain does not have the declared relative degree."""


class ConditioningError(ProbfError):
    """A covariance matrix could not be factorized within the jitter budget."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class InfeasibleError(ProbfError):
    """A safety projection has an empty feasible set."""


class SolverStall(ProbfError):
    """The conic solver hit its iteration cap without converging."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class ConfigError(ProbfError, ValueError):
    """An experiment configuration is malformed."""
