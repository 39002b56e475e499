"""Exception types shared across the package."""

from __future__ import annotations


class TreeIpmError(Exception):
    """Base class for all solver errors."""


class ProblemFormatError(TreeIpmError, ValueError):
    """A problem document or container violates the input contract."""


class DisconnectedGraphError(TreeIpmError):
    """A graph expected to be connected has several components."""

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(
            "disconnected components: "
            + "; ".join(str(c) for c in self.components)
        )


class EliminationError(TreeIpmError):
    """A per-clique elimination block is singular or ill posed."""


class InfeasibleEqualityError(TreeIpmError):
    """The stacked equality system admits no solution."""


class NotStrictlyFeasibleError(TreeIpmError):
    """A starting point sits on or outside the inequality boundary."""


class InfeasibleProblemError(TreeIpmError):
    """Phase one certified that no strictly feasible point exists."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class LineSearchStallError(TreeIpmError):
    """The backtracking step size shrank below the stall threshold."""


class TopologyError(TreeIpmError):
    """An agent attempted to message a node that is not a tree neighbour."""


class AccountingError(TreeIpmError):
    """Recorded message-passing counters violate the schedule identity."""
