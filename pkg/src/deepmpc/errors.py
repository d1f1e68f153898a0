"""Exception hierarchy shared across the package.

``ConfigurationError`` and its subclasses mark setups that cannot run at
all (empty tightened sets, infeasible governor, bad bounds); everything
else signals a runtime defect such as a controller emitting an
out-of-bounds input.
"""


class DeepMpcError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DeepMpcError):
    """A scenario or solver configuration that cannot be run."""


class EmptyTightenedSet(ConfigurationError):
    """Constraint tightening produced an empty set.

    Attributes:
        coordinate: index of the first state coordinate whose tightened
            interval is empty, or ``None`` for input sets.
    """

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class GovernorInfeasible(ConfigurationError):
    """The offline reference governor problem has no feasible trajectory."""


class InputBoundViolation(DeepMpcError):
    """An applied input left the admissible set; signals a controller bug."""


class SingularGainMatrix(DeepMpcError):
    """The control influence matrix lost column rank."""


class NotEnoughData(DeepMpcError):
    """A training dataset was requested from a buffer that is too small."""


class TrainingDiverged(DeepMpcError):
    """Hidden-layer training produced a non-finite loss; old weights stand."""
