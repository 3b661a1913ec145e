"""Exception types shared across the toolkit."""

from __future__ import annotations


class MrpError(Exception):
    """Base class for all toolkit errors."""


class RowSumExceedsOne(MrpError):
    """A transition-matrix row sums to more than 1 (beyond tolerance)."""


class RewardOutOfBounds(MrpError):
    """A reward model has support outside [-1, 1]."""


class NotAbsorbing(MrpError):
    """Neumann decay of the kernel was not observed within the power cap."""


class SingularSystem(MrpError):
    """A linear system that should be invertible failed to solve."""


class ZeroOccupancy(MrpError):
    """A queried state has occupancy measure zero (unreachable)."""

    def __init__(self, states):
        self.states = tuple(states) if not isinstance(states, int) else (states,)
        super().__init__(f"zero occupancy at state(s) {self.states}")


class NotTransient(MrpError):
    """The subgraph can be re-entered after leaving it."""


class TruncationBudgetExceeded(MrpError):
    """No truncation horizon satisfying the tail tolerance within the cap."""


class MaxLenExceeded(MrpError):
    """A sampled trajectory exceeded max_len without reaching the terminal."""


class FixedPointNotContractive(MrpError):
    """The empirical fixed-point iteration failed to decay within the cap."""


class ZeroVisits(MrpError):
    """A required state was never visited in the dataset."""

    def __init__(self, states):
        self.states = tuple(states) if not isinstance(states, int) else (states,)
        super().__init__(f"no visits to state(s) {self.states}")


class NonFiniteIterate(MrpError):
    """An online iterate became NaN or infinite (divergence guard)."""


class InsufficientBudget(MrpError):
    """The dataset is too small for the requested data-splitting scheme."""


class BudgetExceeded(MrpError):
    """An evaluation budget ran out before the search converged."""


class ParameterMismatch(MrpError):
    """Inconsistent parameters passed to a benchmark family."""
