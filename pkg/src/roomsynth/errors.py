"""Exception hierarchy.

Every error raised by the package derives from :class:`RoomsynthError`.
Validation problems derive from :class:`ModelError`, which the CLI maps
to exit code 2.
"""


class RoomsynthError(Exception):
    """Base class for all package errors."""


class ModelError(RoomsynthError, ValueError):
    """An input model violates a structural invariant."""


# mdp-core
class NonStochasticRow(ModelError):
    pass


class ToleranceNotPositive(RoomsynthError, ValueError):
    pass


class UnknownState(RoomsynthError, KeyError):
    pass


class NotErgodic(RoomsynthError):
    pass


class PolicyMismatch(ModelError):
    pass


# two-level model
class DirectionMismatch(ModelError):
    pass


class MissingEntrance(ModelError):
    pass


class ExitOverlap(ModelError):
    pass


class InitialDirectionInvalid(ModelError):
    pass


class InvalidMap(ModelError):
    pass


class InvalidRoom(ModelError):
    pass


class InvalidPath(RoomsynthError, ValueError):
    pass


# latent abstraction
class DomainMismatch(ModelError):
    pass


class LabelMismatch(ModelError):
    pass


class EmptySample(RoomsynthError, ValueError):
    pass


class MissingEstimates(RoomsynthError, ValueError):
    pass


class DegenerateReset(RoomsynthError, ValueError):
    pass


class CapExceeded(RoomsynthError):
    """Certification stopped at the sample cap; ``report`` is still attached."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class UnseenPairWithoutSmoothing(RoomsynthError, ValueError):
    pass


# synthesis
class MissingPolicy(ModelError):
    pass


class NonEpisodicRoom(ModelError):
    pass


class ImproperPolicy(RoomsynthError, ValueError):
    pass


class OracleOutOfRange(RoomsynthError, ValueError):
    pass


class SupportMismatch(RoomsynthError):
    pass


class BsccConditionViolated(RoomsynthError):
    pass


# grid world / trainer
class StateSpaceTooLarge(ModelError):
    def __init__(self, count, cap):
        super().__init__(
            f"room enumerates {count} states, above the cap of {cap}; "
            "shrink the grid, the adversary count, the life points or the step limit"
        )
        self.count = count
        self.cap = cap


class NoExplorationCoverage(RoomsynthError):
    pass


class MissingArtifact(RoomsynthError):
    pass
