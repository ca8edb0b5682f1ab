"""Exception types shared across the package."""


class VacantLabError(Exception):
    """Base class for all errors raised by vacantlab."""


# lattice
class GeometryInfeasible(VacantLabError, ValueError):
    pass


class EmptyDelta(VacantLabError):
    pass


# walk
class Timeout(VacantLabError):
    pass


class StepCapExceeded(VacantLabError):
    pass


# potential
class TooLarge(VacantLabError):
    pass


class SolverDiverged(VacantLabError):
    pass


class EmptySet(VacantLabError, ValueError):
    pass


# slt / chains
class DegenerateRow(VacantLabError, ValueError):
    pass


class EpsilonOutOfRange(VacantLabError, ValueError):
    pass


class InvariantMismatch(VacantLabError, ValueError):
    pass


class NotEnoughSteps(VacantLabError, ValueError):
    pass


class BoundInapplicable(VacantLabError):
    """A bound is undefined for the given inputs (zero variance, k <= 0, ...)."""


class NotConverged(VacantLabError):
    pass


# concentration
class GammaOutOfRange(VacantLabError, ValueError):
    pass


class KNonpositive(BoundInapplicable):
    pass


class DeltaOutOfRange(VacantLabError, ValueError):
    pass


class FOutOfRange(VacantLabError, ValueError):
    pass


# cli
class ConfigError(VacantLabError, ValueError):
    pass


class StageError(VacantLabError):
    """Wraps an error raised inside one stage of an experiment pipeline."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
