"""Exception hierarchy shared across the package."""


class PlaneQCError(Exception):
    """Base class for every error raised by planeqc."""


class DimensionError(PlaneQCError, ValueError):
    pass


class DomainError(PlaneQCError, ValueError):
    pass


class ContractError(PlaneQCError, RuntimeError):
    pass


class NonFiniteError(PlaneQCError, FloatingPointError):
    pass


class FormatError(PlaneQCError, ValueError):
    """Malformed file (PGM, STRQ container, manifest)."""


class ConfigError(PlaneQCError, ValueError):
    pass


class StateError(PlaneQCError, RuntimeError):
    """Operation called in the wrong lifecycle state (missing snapshot, unfrozen stats...)."""


class CalibrationError(PlaneQCError, RuntimeError):
    pass


class ScoringError(PlaneQCError, RuntimeError):
    pass


class DegenerateError(PlaneQCError, ValueError):
    """Statistic undefined for the given data (zero variance)."""


class StaleCacheError(StateError):
    pass
