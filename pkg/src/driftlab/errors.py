"""Exception types raised by driftlab.  The CLI maps these onto exit codes:
ConfigError -> 2, NumericFailure -> 3, any other DriftlabError -> 1."""

class DriftlabError(Exception):
    """Base class for all driftlab failures."""

class InvalidRangeError(DriftlabError, ValueError):
    """A parameter is outside its allowed range."""

class StepIndexError(DriftlabError, IndexError):
    """Timestep outside 1..T."""

class NumericFailure(DriftlabError, ArithmeticError):
    """Non-finite values appeared.  step is the timestep involved, if any."""

    def __init__(self, message: str, step: int = None):
        super().__init__(message)
        self.step = step

class DivergenceError(NumericFailure):
    """Training loss became non-finite."""

class InvalidGridError(DriftlabError, ValueError):
    """DDIM subgrid or drift grid is malformed."""

class DimMismatchError(DriftlabError, ValueError):
    pass

class InsufficientSamplesError(DriftlabError, ValueError):
    pass

class LabelOutOfRangeError(DriftlabError, ValueError):
    pass

class KindMismatchError(DriftlabError, ValueError):
    pass

class CheckpointError(DriftlabError):
    pass

class ConfigError(DriftlabError):
    """Experiment config failed schema validation.  field is the dotted
    path of the offending key, e.g. 'schedule.T'."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
