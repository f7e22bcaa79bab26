"""Exception hierarchy shared by all stages."""


class RelaxPAError(Exception):
    """Base class; ``stage`` is filled in by the CLI when re-raising."""

    stage = None


class InvalidArgumentError(RelaxPAError, ValueError):
    pass


class InvalidModelError(RelaxPAError, ValueError):
    pass


class RankError(InvalidModelError):
    pass


class SimulationError(RelaxPAError, FloatingPointError):
    def __init__(self, message, path_index=None):
        super().__init__(message)
        self.path_index = path_index


class ValuationError(RelaxPAError):
    def __init__(self, message, paths=()):
        super().__init__(message)
        self.paths = list(paths)


class BasisError(RelaxPAError):
    pass


class MomentError(RelaxPAError):
    pass


class RangeError(RelaxPAError):
    pass


class ParticipationError(RelaxPAError):
    pass


class InfeasibleError(RelaxPAError):
    def __init__(self, message, best_violation=None):
        super().__init__(message)
        self.best_violation = best_violation


class ConfigError(RelaxPAError):
    pass


class DependencyError(RelaxPAError):
    pass
